"""Training criteria: each returns (scalar loss, gradient w.r.t. logits).

Covered losses:
    * hard-label frame cross entropy
    * soft-label cross entropy against teacher posteriors (distillation)
    * teacher-student adaptation on parallel source/target features
    * CTC over blank-augmented alignments, computed in log space

Probabilities are clamped at EPS = 1e-12 before any log.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netcore
from .featkit import FeatureSequence
from .netcore import Network, Posteriorgram, log_softmax, softmax

EPS = 1e-12


class CriterionError(ValueError):
    pass


@dataclass
class ParallelPair:
    """Frame-synchronous (source, target) feature pair for T/S adaptation."""

    source: FeatureSequence
    target: FeatureSequence

    def __post_init__(self):
        if self.source.num_frames != self.target.num_frames:
            raise CriterionError(
                f"parallel pair frame counts differ: "
                f"{self.source.num_frames} vs {self.target.num_frames}"
            )


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise CriterionError(f"{name} must be a 1-D distribution")
    if np.any(p < -1e-12):
        raise CriterionError(f"{name} has negative entries")
    if abs(p.sum() - 1.0) > 1e-6:
        raise CriterionError(f"{name} is not normalized (sum = {p.sum()})")
    return p


def kl_divergence(p, q) -> float:
    """sum_i p_i log(p_i / q_i), with 0 log 0 = 0 and q clamped at EPS."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise CriterionError(f"length mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], EPS)))))


def entropy(rows: np.ndarray) -> float:
    """Summed Shannon entropy of each row, with 0 log 0 = 0."""
    rows = np.asarray(rows, dtype=np.float64)
    masked = np.where(rows > 0, rows, 1.0)
    return float(-np.sum(rows * np.log(masked)))


def _teacher_rows(teacher) -> np.ndarray:
    if isinstance(teacher, Posteriorgram):
        return teacher.rows
    return np.asarray(teacher, dtype=np.float64)


def soft_ce_loss(teacher, student_logits: np.ndarray):
    """Cross entropy with teacher soft labels; gradient is softmax - teacher.

    Minimizing this is equivalent to minimizing the teacher/student KL
    divergence, since the teacher-entropy term is constant in the student.
    """
    t_rows = _teacher_rows(teacher)
    logits = np.asarray(student_logits, dtype=np.float64)
    if t_rows.shape != logits.shape:
        raise CriterionError(f"shape mismatch: teacher {t_rows.shape} vs logits {logits.shape}")
    logp = log_softmax(logits)
    loss = float(-np.sum(t_rows * logp))
    grad = softmax(logits) - t_rows
    return loss, grad


def hard_ce_loss(labels, student_logits: np.ndarray):
    """Frame-level cross entropy with integer labels."""
    logits = np.asarray(student_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    t, n = logits.shape
    if labels.shape != (t,):
        raise CriterionError(f"need one label per frame ({t}), got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= n):
        raise CriterionError(f"label out of range [0, {n})")
    logp = log_softmax(logits)
    loss = float(-np.sum(logp[np.arange(t), labels]))
    grad = softmax(logits)
    grad[np.arange(t), labels] -= 1.0
    return loss, grad


def interpolated_ce_loss(teacher, labels, student_logits, soft_weight: float = 1.0):
    """soft_weight * soft CE + (1 - soft_weight) * hard CE.

    Defaults to pure soft targets; the hard-label term exists only for
    knowledge-distillation style comparisons.
    """
    if not 0.0 <= soft_weight <= 1.0:
        raise CriterionError("soft_weight must be in [0, 1]")
    ls, gs = soft_ce_loss(teacher, student_logits)
    if soft_weight == 1.0:
        return ls, gs
    lh, gh = hard_ce_loss(labels, student_logits)
    return soft_weight * ls + (1 - soft_weight) * lh, soft_weight * gs + (1 - soft_weight) * gh


def ts_adaptation_loss(teacher_net: Network, student_logits_on_target, pair: ParallelPair):
    """Adaptation loss: teacher posteriors on source features become soft
    targets for the student's logits on the paired target features."""
    logits = np.asarray(student_logits_on_target, dtype=np.float64)
    if teacher_net.spec.output_dim != logits.shape[1]:
        raise CriterionError(
            f"teacher output dim {teacher_net.spec.output_dim} != logits dim {logits.shape[1]}"
        )
    if logits.shape[0] != pair.target.num_frames:
        raise CriterionError("student logits frame count does not match the pair")
    teacher_post = netcore.forward(teacher_net, pair.source.frames)
    return soft_ce_loss(teacher_post, logits)


# ---------------------------------------------------------------------------
# CTC

def _logsumexp2(a, b):
    m = np.maximum(a, b)
    safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = safe + np.log(np.exp(a - safe) + np.exp(b - safe))
    return np.where(np.isneginf(m), -np.inf, out)


def ctc_min_frames(labels) -> int:
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(logits: np.ndarray, labels, blank: int):
    """Negative log probability of the label string under CTC, plus the
    gradient w.r.t. logits, via log-space forward-backward."""
    logits = np.asarray(logits, dtype=np.float64)
    t, n = logits.shape
    labels = [int(x) for x in labels]
    if any(not 0 <= x < n for x in labels):
        raise CriterionError(f"label out of range [0, {n})")
    if blank in labels:
        raise CriterionError("blank symbol may not appear in the label string")
    if not 0 <= blank < n:
        raise CriterionError("blank index out of range")
    if t < ctc_min_frames(labels):
        raise CriterionError(
            f"label string needs at least {ctc_min_frames(labels)} frames, got {t}"
        )

    ext = [blank]
    for lab in labels:
        ext.extend((lab, blank))
    s = len(ext)
    ext = np.asarray(ext)
    logp = log_softmax(logits)
    emit = logp[:, ext]  # (T, S)

    # skip transition s-2 -> s allowed where ext[s] is a label differing
    # from ext[s-2]
    can_skip = np.zeros(s, dtype=bool)
    if s > 2:
        can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    neg = -np.inf
    alpha = np.full((t, s), neg)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    for ti in range(1, t):
        prev = alpha[ti - 1]
        stay = prev
        step = np.full(s, neg)
        step[1:] = prev[:-1]
        skip = np.full(s, neg)
        skip[2:] = np.where(can_skip[2:], prev[:-2], neg)
        alpha[ti] = _logsumexp2(_logsumexp2(stay, step), skip) + emit[ti]

    total = alpha[t - 1, s - 1]
    if s > 1:
        total = _logsumexp2(total, alpha[t - 1, s - 2])
    loss = float(-total)

    beta = np.full((t, s), neg)
    beta[t - 1, s - 1] = emit[t - 1, s - 1]
    if s > 1:
        beta[t - 1, s - 2] = emit[t - 1, s - 2]
    for ti in range(t - 2, -1, -1):
        nxt = beta[ti + 1]
        stay = nxt
        step = np.full(s, neg)
        step[:-1] = nxt[1:]
        skip = np.full(s, neg)
        skip[:-2] = np.where(can_skip[2:], nxt[2:], neg)
        beta[ti] = _logsumexp2(_logsumexp2(stay, step), skip) + emit[ti]

    # paths through (t, s): alpha * beta / emit; normalize by total probability
    with np.errstate(invalid="ignore"):
        log_gamma = alpha + beta - emit - total
    gamma = np.where(np.isneginf(log_gamma), 0.0, np.exp(log_gamma))

    label_post = np.zeros((t, n))
    np.add.at(label_post.T, ext, gamma.T)
    grad = softmax(logits) - label_post
    return loss, grad


# ---------------------------------------------------------------------------
# Teacher-posterior cache: one utterance per file.
#
# Layout (little-endian):
#   magic  4 bytes  b"FSPC"
#   ver    u32      1
#   id     u32 length + UTF-8 utterance id
#   T, N   u32, u32
#   rows   T*N f32  row-major probabilities

_PC_MAGIC = b"FSPC"
_PC_VERSION = 1


def write_posterior_cache(path: str | Path, utt_id: str, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    ident = utt_id.encode()
    with open(path, "wb") as fh:
        fh.write(_PC_MAGIC)
        fh.write(struct.pack("<II", _PC_VERSION, len(ident)))
        fh.write(ident)
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(rows.astype("<f4").tobytes())


def read_posterior_cache(path: str | Path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _PC_MAGIC:
            raise CriterionError(f"{path}: not a posterior cache file")
        version, id_len = struct.unpack("<II", fh.read(8))
        if version != _PC_VERSION:
            raise CriterionError(f"{path}: unsupported cache version {version}")
        utt_id = fh.read(id_len).decode()
        t, n = struct.unpack("<II", fh.read(8))
        rows = np.frombuffer(fh.read(t * n * 4), dtype="<f4")
    if rows.size != t * n:
        raise CriterionError(f"{path}: truncated cache payload")
    rows = rows.reshape(t, n).astype(np.float64)
    # renormalize away float32 quantization so downstream row-sum checks hold
    rows /= rows.sum(axis=1, keepdims=True)
    return utt_id, rows
