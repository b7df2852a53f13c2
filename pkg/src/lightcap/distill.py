"""Knowledge distillation: losses, the Adam loop, and the bare-vs-
distilled experiment runner.

The student is the structurally reduced captioner initialized from the
teacher's interpolated weights; the teacher stays frozen. Distillation
matches softened next-token distributions under teacher forcing, mixed
with the hard-label cross entropy. Everything is deterministic given
the config seed.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .captioner import (
    CaptionerConfig,
    CaptionerParams,
    captioner_from_arrays,
    decoder_logits_all,
    encode_image,
    greedy_decode_batch,
    init_captioner,
    params_to_flat,
)
from .edges import EDGE_METHODS, EdgeConfig, detect_edges, fuse_six
from .metrics import CorpusPair, MetricReport, evaluate_all, tokenize
from .netspec import NetworkSpec, ReductionConfig, apply_prf, toy_backbone_spec
from .ppm import read_ppm
from .synthdata import BOS_ID, EOS_ID, PAD_ID, Vocabulary, build_vocab, load_annotations
from .tensor import ContractError, Tensor


@dataclass
class DistillConfig:
    """Training knobs; `alpha` weights the hard-label loss, the rest of
    the mass goes to the softened teacher KL."""

    temperature: float = 2.0
    alpha: float = 0.5
    lr: float = 3e-3
    epochs: int = 3
    batch_size: int = 25
    seed: int = 0
    prf: int = 1
    edge_method: str | None = None
    channels: int = 3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.prf < 1:
            raise ContractError("prf must be >= 1")
        if self.channels not in (3, 6):
            raise ContractError("channels must be 3 or 6")
        if self.channels == 6 and self.edge_method not in EDGE_METHODS:
            raise ContractError("6-channel training needs an edge method")
        if self.channels == 3 and self.edge_method is not None:
            raise ContractError("edge_method is only meaningful with 6 channels")


@dataclass
class TrainReport:
    train_loss: list[float]  # per-epoch mean
    step_losses: list[float]  # every optimization step, in order
    val_metrics: list[dict]  # per-epoch MetricReport dicts
    wall_time_s: float
    params: CaptionerParams

    def to_json_dict(self) -> dict:
        # wall time is excluded: report files must be byte-identical
        # across reruns with the same seed
        return {
            "train_loss": self.train_loss,
            "step_losses": self.step_losses,
            "val_metrics": self.val_metrics,
        }


# ---------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int = PAD_ID) -> Tensor:
    """Mean negative log-likelihood of target ids, pad positions excluded."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ContractError(f"targets {targets.shape} do not match logits {logits.shape[:-1]}")
    mask = (targets != pad_id).astype(logits.dtype.type)
    n = float(mask.sum())
    if n == 0:
        raise ContractError("cross entropy over only-pad targets is undefined")
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take_along_last(logp, np.where(targets == pad_id, 0, targets))
    return -(picked * mask).sum() * (1.0 / n)


def distillation_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | np.ndarray | None,
    targets: np.ndarray,
    cfg: DistillConfig,
) -> Tensor:
    """alpha * CE(student, targets)
    + (1 - alpha) * T^2 * KL(softmax(teacher/T) || softmax(student/T)),
    the KL averaged over non-pad positions."""
    loss = cross_entropy(student_logits, targets) * cfg.alpha
    if cfg.alpha == 1.0:
        return loss
    if teacher_logits is None:
        raise ContractError("alpha < 1 requires teacher logits")
    t_arr = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_arr.shape != student_logits.shape:
        raise ContractError(
            f"teacher logits {t_arr.shape} do not match student {student_logits.shape}"
        )
    targets = np.asarray(targets)
    mask = (targets != PAD_ID).astype(student_logits.dtype.type)
    n = float(mask.sum())
    temp = cfg.temperature
    # teacher side is constant: fold its log-probs into plain arrays
    shifted = t_arr / temp
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    t_logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    t_p = np.exp(t_logp)
    s_logp = T.log_softmax(student_logits * (1.0 / temp), axis=-1)
    kl_terms = (Tensor(t_p * t_logp, dtype=student_logits.dtype).detach() - s_logp * t_p).sum(axis=-1)
    kl = (kl_terms * mask).sum() * (1.0 / n)
    return loss + kl * ((1.0 - cfg.alpha) * temp * temp)


# ---------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction; a missing grad counts as zero."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            v = np.zeros_like(p.data, dtype=np.float64)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.dtype)


# ---------------------------------------------------------------------
# data plumbing


@dataclass
class CaptionData:
    names: list[str]
    images: np.ndarray  # [N, 3, H, W] float32
    captions: list[list[str]]  # 5 strings per image
    vocab: Vocabulary


def load_caption_data(data_dir, split: str, vocab: Vocabulary | None = None, limit: int | None = None) -> CaptionData:
    """Load one split of a generated dataset directory."""
    import json

    records = {r.image: r for r in load_annotations(os.path.join(data_dir, "annotations.jsonl"))}
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    names = manifest["split"][split]
    if limit is not None:
        names = names[:limit]
    if vocab is None:
        train_recs = [records[n] for n in manifest["split"]["train"]]
        vocab = build_vocab(train_recs)
    images = np.stack([read_ppm(os.path.join(data_dir, n)) for n in names])
    captions = [records[n].captions for n in names]
    return CaptionData(names=list(names), images=images, captions=captions, vocab=vocab)


def fused_inputs(images: np.ndarray, cfg: DistillConfig) -> np.ndarray:
    """Raw RGB for 3-channel runs; RGB + replicated edge map for 6."""
    if cfg.channels == 3:
        return images.astype(np.float32)
    edge_cfg = EdgeConfig(method=cfg.edge_method)
    return np.stack([fuse_six(img, detect_edges(img, edge_cfg)) for img in images])


def encode_captions(captions: list[list[str]], vocab: Vocabulary, max_len: int) -> list[list[list[int]]]:
    """<bos> tokens <eos>, truncated to max_len, per image and reference."""
    out = []
    for refs in captions:
        enc = []
        for cap in refs:
            ids = [BOS_ID] + vocab.encode(tokenize(cap)) + [EOS_ID]
            enc.append(ids[: max_len])
        out.append(enc)
    return out


def _batch_sequences(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing pairs: inputs seq[:-1], targets seq[1:], padded."""
    width = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    targets = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, : len(s) - 1] = s[:-1]
        targets[i, : len(s) - 1] = s[1:]
    return inputs, targets


# ---------------------------------------------------------------------
# training


def make_student(teacher: CaptionerParams, prf: int) -> CaptionerParams:
    """Reduce the teacher's backbone by `prf` with interpolated weights;
    transformer-side parameters are copied (their dims are pinned)."""
    backbone_arrays = {
        k.removeprefix("backbone."): v.data for k, v in teacher.backbone.items()
    }
    reduced_spec, reduced = apply_prf(
        teacher.backbone_spec, backbone_arrays, ReductionConfig(prf)
    )
    arrays = {f"backbone.{k}": v.copy() for k, v in reduced.items()}
    for name, tensor in params_to_flat(teacher).items():
        if not name.startswith("backbone."):
            arrays[name] = tensor.data.copy()
    return captioner_from_arrays(teacher.cfg, reduced_spec, arrays, vocab=teacher.vocab)


def evaluate_captioner(params: CaptionerParams, data: CaptionData, cfg: DistillConfig) -> MetricReport:
    """Greedy-decode the split and score against all five references."""
    inputs = fused_inputs(data.images, cfg)
    decoded = greedy_decode_batch(params, inputs)
    cands = [params.vocab.decode(ids) for ids in decoded]
    refs = [[tokenize(c) for c in caps] for caps in data.captions]
    # scoring needs nonempty candidates; an untrained model may emit
    # an immediate <eos>, which counts as a zero-overlap one-token stub
    cands = [c if c else ["<empty>"] for c in cands]
    return evaluate_all(CorpusPair(cands, refs))


def train_student(
    teacher: CaptionerParams | None,
    data: CaptionData,
    cfg: DistillConfig,
    val_data: CaptionData | None = None,
    student: CaptionerParams | None = None,
) -> TrainReport:
    """Optimize a student under the distillation objective.

    With alpha=1 the teacher is never evaluated (bare fine-tuning). The
    student defaults to the reduced-and-interpolated teacher; pass one
    explicitly to train from elsewhere (e.g. a fresh teacher-to-be).
    """
    start = time.perf_counter()
    if student is None:
        if teacher is None:
            raise ContractError("need a teacher to derive the student from")
        student = make_student(teacher, cfg.prf)
    if cfg.alpha < 1.0 and teacher is None:
        raise ContractError("alpha < 1 requires a teacher")

    flat = params_to_flat(student)
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD15711)))
    inputs = fused_inputs(data.images, cfg)
    max_len = student.cfg.max_caption_len
    enc_caps = encode_captions(data.captions, student.vocab, max_len)

    n = len(data.names)
    step_losses: list[float] = []
    epoch_means: list[float] = []
    val_reports: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            seqs = [enc_caps[i][(epoch + i) % 5] for i in idx]
            in_ids, tgt = _batch_sequences(seqs)
            imgs = Tensor(inputs[idx])
            memory = encode_image(student, imgs)
            logits = decoder_logits_all(student, in_ids, memory)
            t_logits = None
            if cfg.alpha < 1.0:
                with T.no_grad():
                    t_mem = encode_image(teacher, imgs)
                    t_logits = decoder_logits_all(teacher, in_ids, t_mem)
            loss = distillation_loss(logits, t_logits, tgt, cfg)
            for p in flat.values():
                p.zero_grad()
            loss.backward()
            adam_step(flat, state, cfg.lr)
            val = loss.item()
            step_losses.append(val)
            epoch_losses.append(val)
        epoch_means.append(float(np.mean(epoch_losses)))
        if val_data is not None:
            val_reports.append(evaluate_captioner(student, val_data, cfg).to_dict())
    return TrainReport(
        train_loss=epoch_means,
        step_losses=step_losses,
        val_metrics=val_reports,
        wall_time_s=time.perf_counter() - start,
        params=student,
    )


def train_teacher(
    data: CaptionData,
    cfg: DistillConfig,
    val_data: CaptionData | None = None,
    backbone: NetworkSpec | None = None,
    model_cfg: CaptionerConfig | None = None,
) -> TrainReport:
    """Train a fresh full-size captioner with plain cross entropy."""
    if model_cfg is None:
        model_cfg = CaptionerConfig.toy(data.vocab.size, input_channels=cfg.channels)
    if backbone is None:
        backbone = toy_backbone_spec(model_cfg.input_channels, model_cfg.model_dim)
    fresh = init_captioner(model_cfg, backbone, seed=cfg.seed, vocab=data.vocab)
    bare = replace(cfg, alpha=1.0, prf=1)
    return train_student(None, data, bare, val_data=val_data, student=fresh)


# ---------------------------------------------------------------------
# benchmark runners (the paper-table analogues at toy scale)


def run_kd_benchmark(
    data_dir,
    seeds=(0, 1, 2),
    prf: int = 2,
    teacher_epochs: int = 8,
    student_epochs: int = 4,
    n_train: int = 500,
    n_val: int = 60,
    channels: int = 3,
    edge_method: str | None = None,
) -> dict:
    """Bare vs distilled student at the given reduction factor,
    averaged over seeds. Mirrors the bare/distil comparison tables."""
    rows: dict[str, list[dict]] = {"teacher": [], "bare": [], "distil": []}
    for seed in seeds:
        base = DistillConfig(
            seed=seed, epochs=teacher_epochs, channels=channels, edge_method=edge_method
        )
        train = load_caption_data(data_dir, "train", limit=n_train)
        val = load_caption_data(data_dir, "val", vocab=train.vocab, limit=n_val)
        teacher_rep = train_teacher(train, base, val_data=None)
        teacher = teacher_rep.params
        rows["teacher"].append(evaluate_captioner(teacher, val, base).to_dict())
        for mode, alpha in (("bare", 1.0), ("distil", 0.5)):
            cfg = replace(base, epochs=student_epochs, alpha=alpha, prf=prf)
            rep = train_student(teacher, train, cfg, val_data=None)
            rows[mode].append(evaluate_captioner(rep.params, val, cfg).to_dict())
    return {
        "prf": prf,
        "seeds": list(seeds),
        "per_seed": rows,
        "mean": {k: _mean_reports(v) for k, v in rows.items()},
    }


def run_edge_benchmark(
    data_dir,
    seeds=(0, 1, 2),
    methods=EDGE_METHODS,
    epochs: int = 8,
    n_train: int = 500,
    n_val: int = 60,
) -> dict:
    """3-channel vs 6-channel fused input, per edge method, averaged
    over seeds. Mirrors the edge-fusion comparison tables."""
    configs = [("3ch", 3, None)] + [(f"6ch-{m}", 6, m) for m in methods]
    rows: dict[str, list[dict]] = {label: [] for label, _, _ in configs}
    for seed in seeds:
        train = load_caption_data(data_dir, "train", limit=n_train)
        val = load_caption_data(data_dir, "val", vocab=train.vocab, limit=n_val)
        for label, channels, method in configs:
            cfg = DistillConfig(seed=seed, epochs=epochs, channels=channels, edge_method=method)
            rep = train_teacher(train, cfg, val_data=None)
            rows[label].append(evaluate_captioner(rep.params, val, cfg).to_dict())
    return {
        "seeds": list(seeds),
        "per_seed": rows,
        "mean": {k: _mean_reports(v) for k, v in rows.items()},
    }


def _mean_reports(reports: list[dict]) -> dict:
    keys = reports[0].keys()
    return {k: float(np.mean([r[k] for r in reports])) for k in keys}
