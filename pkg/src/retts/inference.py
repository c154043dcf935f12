"""Full-sentence generation and word insertion with frame-exact splicing."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from retts.model import PhonemeSequence, ProsodyContext, ProsodyTrack, InsertionTTS
from retts.numerics import no_grad


@dataclass
class InsertionRequest:
    original_mel: np.ndarray
    original_text: PhonemeSequence
    original_prosody: ProsodyTrack
    new_text: PhonemeSequence
    insert_phoneme_range: tuple[int, int]

    def __post_init__(self):
        start, end = self.insert_phoneme_range
        if not 0 <= start <= end <= len(self.new_text):
            raise ValueError(f"insertion range {self.insert_phoneme_range} outside new text")
        kept = np.concatenate([self.new_text.ids[:start], self.new_text.ids[end:]])
        if not np.array_equal(kept, self.original_text.ids):
            raise ValueError("new text with the insertion removed does not equal the original text")
        if len(self.original_prosody) != len(self.original_text):
            raise ValueError("original prosody and original text differ in length")
        if self.original_prosody.n_frames != self.original_mel.shape[0]:
            raise ValueError(f"original durations cover {self.original_prosody.n_frames} frames, "
                             f"mel has {self.original_mel.shape[0]}")


@dataclass
class SplicePlan:
    left_frames: int
    insert_frames: int
    right_frames: int

    def __post_init__(self):
        if min(self.left_frames, self.insert_frames, self.right_frames) < 0:
            raise ValueError(f"negative frame count in {self}")

    def to_text(self) -> str:
        return f"left\t{self.left_frames}\ninsert\t{self.insert_frames}\nright\t{self.right_frames}\n"

    @classmethod
    def from_text(cls, text: str) -> "SplicePlan":
        values = dict(line.split("\t") for line in text.strip().splitlines())
        return cls(int(values["left"]), int(values["insert"]), int(values["right"]))


@dataclass
class InsertionResult:
    segment: np.ndarray
    plan: SplicePlan
    full_mel: np.ndarray
    generated_mel: np.ndarray | None
    durations: np.ndarray | None


@contextlib.contextmanager
def _frozen(model: InsertionTTS):
    """Eval mode without graph recording; restores the previous training flags."""
    flags = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        with no_grad():
            yield
    finally:
        for m, flag in flags:
            m.training = flag


def generate_full(text: PhonemeSequence, ref_feature: np.ndarray, model: InsertionTTS,
                  return_durations: bool = False):
    """Synthesize a whole sentence in the voice of the reference feature."""
    if len(text) == 0:
        raise ValueError("cannot synthesize an empty phoneme sequence")
    with _frozen(model):
        tokens = model.encode_global_factors(np.asarray(ref_feature, dtype=model.dtype))
        hidden = model.encode_phonemes(text, tokens)
        out = model.variance_adapt(hidden, None, None, "infer")
        mel = model.decode_mel(out.hidden, tokens).data.copy()
    return (mel, out.durations) if return_durations else mel


def splice(original: np.ndarray, segment: np.ndarray, plan: SplicePlan) -> np.ndarray:
    original = np.asarray(original)
    segment = np.asarray(segment)
    if plan.left_frames + plan.right_frames != original.shape[0]:
        raise ValueError(f"plan {plan} does not cover {original.shape[0]} original frames")
    if segment.shape[0] != plan.insert_frames:
        raise ValueError(f"segment has {segment.shape[0]} frames, plan says {plan.insert_frames}")
    if segment.shape[0] and segment.shape[1:] != original.shape[1:]:
        raise ValueError(f"segment shape {segment.shape} incompatible with {original.shape}")
    left = plan.left_frames
    segment = segment.reshape((segment.shape[0],) + original.shape[1:]).astype(original.dtype)
    return np.concatenate([original[:left], segment, original[left:]], axis=0)


def insert_words(req: InsertionRequest, model: InsertionTTS, ref_feature: np.ndarray) -> InsertionResult:
    """Generate the inserted words with the surrounding prosody as context.

    Durations, pitch and energy outside the insertion come from the original
    utterance; inside it they are predicted. Only the inserted frames are
    taken from the generated mel; context frames are copied from the original.
    """
    start, end = req.insert_phoneme_range
    d0 = req.original_prosody.duration
    left = int(d0[:start].sum())
    if start == end:
        plan = SplicePlan(left, 0, req.original_mel.shape[0] - left)
        empty = np.zeros((0, req.original_mel.shape[1]), dtype=req.original_mel.dtype)
        return InsertionResult(empty, plan, req.original_mel.copy(), None, None)

    n_ins = end - start
    gap = np.zeros(n_ins)
    spliced = ProsodyTrack(
        np.concatenate([d0[:start], gap.astype(np.int64), d0[start:]]),
        np.concatenate([req.original_prosody.pitch[:start], gap, req.original_prosody.pitch[start:]]),
        np.concatenate([req.original_prosody.energy[:start], gap, req.original_prosody.energy[start:]]),
    )
    in_range = np.zeros(len(req.new_text), dtype=bool)
    in_range[start:end] = True
    ctx = ProsodyContext.from_track(spliced, in_range)
    with _frozen(model):
        tokens = model.encode_global_factors(np.asarray(ref_feature, dtype=model.dtype))
        hidden = model.encode_phonemes(req.new_text, tokens)
        out = model.variance_adapt(hidden, ctx, spliced, "infer", predict_mask=in_range)
        generated = model.decode_mel(out.hidden, tokens).data.copy()
    insert_frames = int(out.durations[start:end].sum())
    segment = generated[left:left + insert_frames]
    plan = SplicePlan(left, insert_frames, req.original_mel.shape[0] - left)
    return InsertionResult(segment, plan, splice(req.original_mel, segment, plan), generated, out.durations)


def make_insertion_request(mel: np.ndarray, text: PhonemeSequence, prosody: ProsodyTrack,
                           at_word: int, words: list[list[int]]) -> InsertionRequest:
    """Insert ``words`` (lists of phoneme ids) before word ``at_word`` of ``text``."""
    existing = text.words()
    if not 0 <= at_word <= len(existing):
        raise ValueError(f"--at-word {at_word} outside 0..{len(existing)}")
    new_text = PhonemeSequence.from_words(existing[:at_word] + list(words) + existing[at_word:])
    start = sum(len(w) for w in existing[:at_word])
    end = start + sum(len(w) for w in words)
    return InsertionRequest(np.asarray(mel), text, prosody, new_text, (start, end))
