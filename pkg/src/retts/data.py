"""Synthetic speech corpus with recoverable speaker identity, plus its on-disk layout.

Each speaker owns a spectral envelope (timbre), a base pitch, a tempo and a
feature signature. Mel frames are ``timbre * phone_template + pitch tilt +
energy + noise`` and reference features are ``signature + content + noise``,
so speaker identity is present in both the mel and the reference feature.

Layout of a corpus directory::

    corpus.txt      key=value generation settings
    manifest.tsv    id, speaker, phonemes, mel, feature, prosody, frame tracks
    speakers.tsv    speaker, base_pitch, tempo, energy_base, timbre, signature
    speakers/       timbre envelopes and feature signatures (matrix files)
    utts/           per-utterance matrix files

Phonemes are written as comma-separated ids with ``|`` between words.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from retts.alignment import pool_phoneme_prosody
from retts.io import load_matrix, save_matrix
from retts.model import PhonemeSequence, ProsodyTrack
from retts.numerics import RngStream


@dataclass
class SyntheticSpeaker:
    id: int
    base_pitch: float
    tempo: float
    energy_base: float
    timbre_vec: np.ndarray
    feature_basis: np.ndarray


@dataclass
class Utterance:
    id: str
    speaker: int
    phonemes: PhonemeSequence
    prosody: ProsodyTrack
    mel: np.ndarray
    ref_feature: np.ndarray
    frame_pitch: np.ndarray
    frame_energy: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def format_phonemes(seq: PhonemeSequence) -> str:
    return "|".join(",".join(str(i) for i in word) for word in seq.words())


def parse_phonemes(text: str) -> PhonemeSequence:
    words = []
    for chunk in text.strip().split("|"):
        if not chunk.strip():
            raise ValueError(f"empty word in phoneme string {text!r}")
        words.append([int(tok) for tok in chunk.split(",")])
    return PhonemeSequence.from_words(words)


def _smooth(x: np.ndarray, width: int = 3) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(np.pad(x, width // 2, mode="edge"), kernel, mode="valid")


class SyntheticWorld:
    """Deterministic generator: everything is a function of the corpus seed."""

    def __init__(self, seed: int = 0, n_mels: int = 20, feature_dim: int = 32, vocab: int = 40):
        self.seed = seed
        self.n_mels = n_mels
        self.feature_dim = feature_dim
        self.vocab = vocab
        g = RngStream(seed, "world").generator()
        self.phone_template = g.normal(0.0, 1.0, (vocab, n_mels))
        self.base_duration = g.integers(2, 6, vocab)
        self.phone_pitch = g.normal(0.0, 0.3, vocab)
        self.phone_energy = g.normal(0.0, 0.3, vocab)
        self.feature_template = g.normal(0.0, 1.0, (vocab, feature_dim))
        self.pitch_tilt = np.linspace(-0.5, 0.5, n_mels)

    def speaker(self, speaker_id: int) -> SyntheticSpeaker:
        g = RngStream(self.seed, f"speaker/{speaker_id}").generator()
        base_pitch = float(g.normal(0.0, 1.0))
        tempo = float(g.uniform(0.7, 1.4))
        energy_base = float(g.normal(0.0, 0.5))
        timbre = np.exp(0.5 * _smooth(g.normal(0.0, 1.0, self.n_mels)))
        basis = g.normal(0.0, 1.5, self.feature_dim)
        return SyntheticSpeaker(speaker_id, base_pitch, tempo, energy_base, timbre, basis)

    def utterance(self, speaker: SyntheticSpeaker, index: int) -> Utterance:
        g = RngStream(self.seed, f"utt/{speaker.id}/{index}").generator()
        n_words = int(g.integers(3, 7))
        words = [g.integers(0, self.vocab, int(g.integers(2, 5))).tolist() for _ in range(n_words)]
        phonemes = PhonemeSequence.from_words(words)
        ids = phonemes.ids
        raw = speaker.tempo * self.base_duration[ids] + g.normal(0.0, 0.4, len(ids))
        durations = np.maximum(1, np.rint(raw)).astype(np.int64)
        pitch = (speaker.base_pitch + self.phone_pitch[ids] - 0.1 * phonemes.word_index
                 + g.normal(0.0, 0.1, len(ids)))
        energy = speaker.energy_base + self.phone_energy[ids] + g.normal(0.0, 0.1, len(ids))
        frame_ids = np.repeat(ids, durations)
        n_frames = len(frame_ids)
        frame_pitch = np.repeat(pitch, durations) + g.normal(0.0, 0.05, n_frames)
        frame_energy = np.repeat(energy, durations) + g.normal(0.0, 0.05, n_frames)
        mel = (speaker.timbre_vec * self.phone_template[frame_ids]
               + frame_pitch[:, None] * self.pitch_tilt
               + 0.5 * frame_energy[:, None]
               + g.normal(0.0, 0.05, (n_frames, self.n_mels)))
        feature = (speaker.feature_basis + 0.3 * self.feature_template[frame_ids]
                   + g.normal(0.0, 0.1, (n_frames, self.feature_dim)))
        p, e = pool_phoneme_prosody(frame_pitch, frame_energy, durations)
        return Utterance(
            id=f"spk{speaker.id:03d}_utt{index:03d}",
            speaker=speaker.id,
            phonemes=phonemes,
            prosody=ProsodyTrack(durations, p, e),
            mel=mel,
            ref_feature=feature,
            frame_pitch=frame_pitch,
            frame_energy=frame_energy,
        )

    def corpus(self, n_speakers: int, n_utts: int) -> tuple[list[SyntheticSpeaker], list[Utterance]]:
        if n_speakers < 1 or n_utts < 1:
            raise ValueError("need at least one speaker and one utterance per speaker")
        speakers = [self.speaker(s) for s in range(n_speakers)]
        utts = [self.utterance(spk, u) for spk in speakers for u in range(n_utts)]
        return speakers, utts


def gen_corpus(out_dir, n_speakers: int, n_utts_per_speaker: int, seed: int = 0,
               n_mels: int = 20, feature_dim: int = 32, vocab: int = 40) -> list[Utterance]:
    out = Path(out_dir)
    (out / "utts").mkdir(parents=True, exist_ok=True)
    (out / "speakers").mkdir(exist_ok=True)
    world = SyntheticWorld(seed, n_mels, feature_dim, vocab)
    speakers, utts = world.corpus(n_speakers, n_utts_per_speaker)
    settings = {"seed": seed, "n_speakers": n_speakers, "n_utts_per_speaker": n_utts_per_speaker,
                "n_mels": n_mels, "feature_dim": feature_dim, "vocab": vocab}
    (out / "corpus.txt").write_text("".join(f"{k}={v}\n" for k, v in settings.items()), encoding="utf-8")
    spk_lines = []
    for spk in speakers:
        stem = f"speakers/spk{spk.id:03d}"
        save_matrix(out / f"{stem}.timbre", spk.timbre_vec)
        save_matrix(out / f"{stem}.basis", spk.feature_basis)
        spk_lines.append(f"{spk.id}\t{spk.base_pitch!r}\t{spk.tempo!r}\t{spk.energy_base!r}"
                         f"\t{stem}.timbre\t{stem}.basis\n")
    (out / "speakers.tsv").write_text("".join(spk_lines), encoding="utf-8")
    lines = []
    for utt in utts:
        rel = save_utterance(out / "utts", utt)
        lines.append("\t".join([utt.id, str(utt.speaker), format_phonemes(utt.phonemes),
                                *(f"utts/{r}" for r in rel)]) + "\n")
    (out / "manifest.tsv").write_text("".join(lines), encoding="utf-8")
    return utts


def save_utterance(directory, utt: Utterance) -> tuple[str, str, str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = (f"{utt.id}.mel", f"{utt.id}.feat", f"{utt.id}.pros", f"{utt.id}.frames")
    save_matrix(directory / names[0], utt.mel)
    save_matrix(directory / names[1], utt.ref_feature)
    save_matrix(directory / names[2], np.stack(
        [utt.prosody.duration.astype(np.float64), utt.prosody.pitch, utt.prosody.energy], axis=1))
    save_matrix(directory / names[3], np.stack([utt.frame_pitch, utt.frame_energy], axis=1))
    return names


def _read_utterance(root: Path, fields: list[str]) -> Utterance:
    uid, speaker, phon, mel_p, feat_p, pros_p, frames_p = fields
    pros = load_matrix(root / pros_p)
    frames = load_matrix(root / frames_p)
    mel = load_matrix(root / mel_p)
    prosody = ProsodyTrack(np.rint(pros[:, 0]).astype(np.int64), pros[:, 1], pros[:, 2])
    phonemes = parse_phonemes(phon)
    if len(phonemes) != len(prosody) or prosody.n_frames != mel.shape[0]:
        raise ValueError(f"utterance {uid}: phonemes/prosody/mel lengths disagree")
    return Utterance(uid, int(speaker), phonemes, prosody, mel, load_matrix(root / feat_p),
                     frames[:, 0].copy(), frames[:, 1].copy())


def load_corpus(corpus_dir) -> list[Utterance]:
    root = Path(corpus_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.tsv in {root}")
    utts = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise ValueError(f"{manifest}:{lineno}: expected 7 tab-separated fields, got {len(fields)}")
        utts.append(_read_utterance(root, fields))
    return utts


def find_utterance(corpus_dir, key: str) -> Utterance:
    """Look up an utterance by id or by the path/name of any of its files."""
    stem = Path(key).name.split(".")[0]
    for utt in load_corpus(corpus_dir):
        if utt.id == stem:
            return utt
    raise KeyError(f"utterance {key!r} not in {corpus_dir}")


def remove_words(utt: Utterance, first: int, last: int) -> tuple[Utterance, int]:
    """Cut words first..last (inclusive) out of an utterance, frames included.

    Returns the shortened utterance and the number of frames removed.
    """
    start, end = utt.phonemes.word_span(first, last)
    d = utt.prosody.duration
    f0, f1 = int(d[:start].sum()), int(d[:end].sum())
    keep_ph = np.r_[0:start, end:len(d)]
    kept_words = [w for i, w in enumerate(utt.phonemes.words()) if not first <= i <= last]
    if not kept_words:
        raise ValueError("cannot remove every word of an utterance")
    keep_fr = np.r_[0:f0, f1:utt.n_frames]
    short = replace(
        utt,
        id=f"{utt.id}_minus_{first}_{last}",
        phonemes=PhonemeSequence.from_words(kept_words),
        prosody=ProsodyTrack(d[keep_ph], utt.prosody.pitch[keep_ph], utt.prosody.energy[keep_ph]),
        mel=utt.mel[keep_fr],
        ref_feature=utt.ref_feature[keep_fr],
        frame_pitch=utt.frame_pitch[keep_fr],
        frame_energy=utt.frame_energy[keep_fr],
    )
    return short, f1 - f0
