"""Speaker-token similarity and gradient-check sweeps used by the CLI and tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from retts.alignment import Aligner, forward_sum_loss, soft_alignment
from retts.layers import (
    ConvFFN,
    CrossAttentionModule,
    FFTBlock,
    LinkAttentionBlock,
    MultiHeadAttention,
    VariancePredictor,
)
from retts.model import ModelConfig, PhonemeSequence, ProsodyContext, ProsodyTrack, InsertionTTS
from retts.numerics import (
    RngStream,
    Tensor,
    conv1d,
    grad_check_many,
    layer_norm,
    matmul,
    no_grad,
    softmax_lastdim,
    tsum,
)
from retts.training import Discriminator, Stage1Prediction, Stage1Target, TrainConfig, stage1_loss


# -- speaker similarity ------------------------------------------------------------

def pooled_tokens(model: InsertionTTS, features: Sequence[np.ndarray]) -> np.ndarray:
    """Mean over the m global tokens, one row per reference feature."""
    with no_grad():
        return np.stack([model.encode_global_factors(np.asarray(f, dtype=model.dtype)).data.mean(axis=0)
                         for f in features]).astype(np.float64)


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    unit = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    return unit @ unit.T


@dataclass
class SpeakerSimilarity:
    matrix: np.ndarray
    within_mean: float
    across_mean: float
    pair_accuracy: float   # fraction of (anchor, same, other) triples ranked correctly


def speaker_similarity(vectors: np.ndarray, speakers: Sequence[int]) -> SpeakerSimilarity:
    """Compare each utterance's same-speaker similarities against its cross-speaker ones."""
    sim = cosine_matrix(vectors)
    spk = np.asarray(speakers)
    same = spk[:, None] == spk[None, :]
    off_diag = ~np.eye(len(spk), dtype=bool)
    wins = total = 0
    for a in range(len(spk)):
        w = sim[a, same[a] & off_diag[a]]
        x = sim[a, ~same[a]]
        if len(w) == 0 or len(x) == 0:
            continue
        wins += int(np.sum(w[:, None] > x[None, :]))
        total += w.size * x.size
    within = sim[same & off_diag]
    across = sim[~same]
    return SpeakerSimilarity(sim, float(within.mean()) if within.size else float("nan"),
                             float(across.mean()) if across.size else float("nan"),
                             wins / total if total else float("nan"))


# -- gradient checks -----------------------------------------------------------------

def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(out * Tensor(weights))


def _case(build: Callable[[RngStream], tuple[Callable[[], Tensor], list[Tensor]]], seed: int):
    rng = RngStream(seed, "gradcheck")
    return build(rng)


def _inputs(rng: RngStream, *shapes) -> list[Tensor]:
    g = rng.generator()
    return [Tensor(g.standard_normal(s), requires_grad=True) for s in shapes]


def _module_case(module, call, input_shapes, out_shape):
    def build(rng: RngStream):
        module.to(np.float64)
        xs = _inputs(rng, *input_shapes)
        w = rng.generator().standard_normal(out_shape)
        return (lambda: _weighted_sum(call(*xs), w)), xs + module.parameters()
    return build


def gradcheck_cases(cfg: ModelConfig) -> dict[str, Callable]:
    """Named builders returning (loss closure, tensors to check), all in float64."""
    d, m, hidden = cfg.d_model, cfg.m, cfg.ffn_hidden
    init = RngStream(11, "gradcheck/init")
    cases: dict[str, Callable] = {}

    def matmul_case(rng):
        a, b = _inputs(rng, (2, 3, 4), (4, 5))
        w = rng.generator().standard_normal((2, 3, 5))
        return (lambda: _weighted_sum(matmul(a, b), w)), [a, b]

    def softmax_case(rng):
        (x,) = _inputs(rng, (3, 5))
        w = rng.generator().standard_normal((3, 5))
        return (lambda: _weighted_sum(softmax_lastdim(x), w)), [x]

    def layer_norm_case(rng):
        x, gamma, beta = _inputs(rng, (4, 6), (6,), (6,))
        w = rng.generator().standard_normal((4, 6))
        return (lambda: _weighted_sum(layer_norm(x, gamma, beta), w)), [x, gamma, beta]

    def conv_case(rng):
        x, k, b = _inputs(rng, (7, 3), (5, 3, 4), (4,))
        w = rng.generator().standard_normal((4, 4))
        return (lambda: _weighted_sum(conv1d(x, k, b, stride=2, padding=2), w)), [x, k, b]

    cases["matmul"] = matmul_case
    cases["softmax"] = softmax_case
    cases["layer_norm"] = layer_norm_case
    cases["conv1d"] = conv_case

    mha = MultiHeadAttention(d, d + 1, d + 2, d, cfg.n_heads, init)
    cases["multi_head_attention"] = _module_case(
        mha, lambda q, k, v: mha(q, k, v), [(3, d), (4, d + 1), (4, d + 2)], (3, d))
    ffn = ConvFFN(d, hidden, init)
    cases["conv_ffn"] = _module_case(ffn, ffn, [(4, d)], (4, d))
    fft = FFTBlock(d, hidden, cfg.n_heads, init)
    cases["fft_block"] = _module_case(fft, fft, [(3, d)], (3, d))
    link = LinkAttentionBlock(d, hidden, cfg.n_heads, init)
    cases["link_attention_block"] = _module_case(link, link, [(3, d), (m, d), (m, d)], (3, d))
    cross = CrossAttentionModule(cfg.gfe_channels, cfg.feature_dim, m, cfg.gfe_ffn_hidden,
                                 cfg.n_heads, init)
    cases["cross_attention_module"] = _module_case(
        cross, cross, [(m, cfg.gfe_channels), (5, cfg.feature_dim)], (m, cfg.gfe_channels))
    vp = VariancePredictor(d, cfg.predictor_channels, init).eval()
    cases["variance_predictor"] = _module_case(vp, vp, [(4, d)], (4,))
    disc = Discriminator(cfg.n_mels, 8, (4, 6), init, kernel=5, stride=2)
    # the head starts at zero; give it weights so the score path is exercised
    disc.head.weight.data = init.generator().normal(0.0, 0.3, disc.head.weight.shape).astype(np.float32)
    cases["discriminator"] = _module_case(
        disc, lambda x: _disc_out(disc, x), [(8, cfg.n_mels)], (1 + 4 * 4 + 2 * 6,))

    aligner = Aligner(cfg.phoneme_vocab, cfg.n_mels, cfg.aligner_dim, init)

    def align_case(rng):
        aligner.to(np.float64)
        mel, emb = _inputs(rng, (6, cfg.n_mels), (3, cfg.aligner_dim))
        return (lambda: forward_sum_loss(soft_alignment(mel, emb, aligner).log_A)), \
            [mel, emb] + aligner.parameters()

    cases["alignment_forward_sum"] = align_case
    cases["end_to_end"] = lambda rng: end_to_end_case(cfg, rng)
    return cases


def _disc_out(disc: Discriminator, x: Tensor) -> Tensor:
    from retts.numerics import concat

    score, feats = disc(x)
    return concat([score.reshape(1)] + [f.reshape(f.data.size) for f in feats])


def end_to_end_case(cfg: ModelConfig, rng: RngStream):
    """Stage-1 loss of the whole model on a 3-phoneme, 6-frame utterance."""
    model = InsertionTTS(cfg, seed=5, dtype=np.float64).eval()
    g = rng.generator()
    n_frames = 6
    text = PhonemeSequence(g.integers(0, cfg.phoneme_vocab, 3), [0, 0, 1])
    teacher = ProsodyTrack([2, 1, 3], g.normal(size=3), g.normal(size=3))
    ctx = ProsodyContext.from_track(teacher, np.array([False, True, False]))
    mel = g.normal(size=(n_frames, cfg.n_mels))
    feature = Tensor(g.normal(size=(5, cfg.feature_dim)), requires_grad=True)
    tcfg = TrainConfig()

    def loss():
        tokens = model.encode_global_factors(feature)
        hidden = model.encode_phonemes(text, tokens)
        out = model.variance_adapt(hidden, ctx, teacher, "train")
        mel_hat = model.decode_mel(out.hidden, tokens)
        log_A = soft_alignment(Tensor(mel), model.aligner.embed(text.ids), model.aligner).log_A
        pred = Stage1Prediction(mel_hat, out.log_duration, out.pitch, out.energy)
        return stage1_loss(pred, Stage1Target(mel, teacher), log_A, tcfg).total

    return loss, [feature] + model.parameters()


def run_gradchecks(cfg: ModelConfig, eps: float = 1e-6, max_coords: int | None = 12,
                   seed: int = 0, names: Sequence[str] | None = None) -> dict[str, float]:
    """Max relative error per case; large tensors are probed at ``max_coords`` coordinates."""
    results = {}
    for name, build in gradcheck_cases(cfg).items():
        if names is not None and name not in names:
            continue
        f, tensors = _case(build, seed)
        results[name] = grad_check_many(f, tensors, eps, max_coords,
                                        np.random.default_rng(seed))
    return results
