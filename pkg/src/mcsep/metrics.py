"""Si-SNR, projection SDR, permutation-resolved scoring and bucket reports."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import matmul_toeplitz, solve, solve_toeplitz
from scipy.signal import fftconvolve

from .room import BUCKET_NAMES

CAP_DB = 80.0
RIDGE = 1e-10
MAX_PERMUTATION_SOURCES = 4


def _ratio_db(target_energy: float, noise_energy: float) -> float:
    """``10 log10(target / noise)`` limited to ``[-CAP_DB, CAP_DB]``."""
    if target_energy <= 0.0:
        return -CAP_DB
    if noise_energy <= target_energy * 10.0 ** (-CAP_DB / 10.0):
        return CAP_DB
    if target_energy <= noise_energy * 10.0 ** (-CAP_DB / 10.0):
        return -CAP_DB
    return 10.0 * math.log10(target_energy / noise_energy)


def _pair(est, ref):
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.ndim != 1 or est.shape != ref.shape:
        raise ValueError(f"estimate {est.shape} and reference {ref.shape} must be equal-length 1-D")
    return est, ref


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB after removing both means."""
    est, ref = _pair(est, ref)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("reference has zero energy after mean removal")
    target = (float(est @ ref) / ref_energy) * ref
    noise = est - target
    return _ratio_db(float(target @ target), float(noise @ noise))


@dataclass(frozen=True)
class SdrResult:
    sdr: float
    target_energy: float
    interference_energy: float
    artifact_energy: float
    flagged: bool = False  # projection system was ill-conditioned


def _delayed_gram(ref, filter_len):
    """First column of the Gram matrix of ``filter_len`` delayed copies."""
    n = len(ref)
    full = fftconvolve(ref, ref[::-1])[n - 1:]
    col = np.zeros(filter_len)
    m = min(filter_len, n)
    col[:m] = full[:m]
    return col


def _project_single(est_pad, ref, filter_len):
    """Projection of ``est_pad`` onto the span of delayed ``ref`` copies."""
    n = len(ref)
    col = _delayed_gram(ref, filter_len)
    if col[0] == 0.0:
        raise ValueError("reference has zero energy")
    rhs = fftconvolve(est_pad, ref[::-1])[n - 1:n - 1 + filter_len]
    reg = col.copy()
    reg[0] += RIDGE * col[0]
    coef = solve_toeplitz(reg, rhs)
    check = matmul_toeplitz(reg, coef)
    flagged = not np.allclose(check, rhs, rtol=1e-6, atol=1e-12 * col[0]) or not np.all(np.isfinite(coef))
    proj = fftconvolve(ref, coef)[:len(est_pad)]
    return proj, flagged


def _project_multi(est_pad, refs, filter_len):
    """Projection onto the joint span of all references' delayed copies."""
    n_src, n = refs.shape
    total = n + filter_len - 1
    basis = np.zeros((n_src * filter_len, total))
    for s in range(n_src):
        for d in range(filter_len):
            basis[s * filter_len + d, d:d + n] = refs[s]
    gram = basis @ basis.T
    gram[np.diag_indices_from(gram)] += RIDGE * np.trace(gram) / len(gram)
    coef = solve(gram, basis @ est_pad, assume_a="pos")
    flagged = np.linalg.cond(gram) > 1e12
    return coef @ basis, flagged


def sdr_components(est, refs, target: int = 0, filter_len: int = 512, decompose_all: bool = True) -> SdrResult:
    """Projection-based distortion decomposition.

    ``est`` and the references are zero-padded by ``filter_len - 1`` samples;
    the target part is the least-squares fit by an FIR filter of the target
    reference, interference is the extra part explained by the other
    references and the artifact part is what neither explains.  Without
    ``decompose_all`` only the target projection is computed, which is enough
    for the SDR value itself.
    """
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    est, _ = _pair(est, refs[target])
    if filter_len < 1:
        raise ValueError("filter_len must be at least 1")
    est_pad = np.concatenate([est, np.zeros(filter_len - 1)])
    target_part, flagged = _project_single(est_pad, refs[target], filter_len)
    distortion = est_pad - target_part
    if decompose_all and len(refs) > 1:
        joint, flag_all = _project_multi(est_pad, refs, filter_len)
        interference = joint - target_part
        artifact = est_pad - joint
        flagged = flagged or flag_all
    else:
        interference = np.zeros_like(est_pad)
        artifact = distortion
    t_e = float(target_part @ target_part)
    return SdrResult(
        sdr=_ratio_db(t_e, float(distortion @ distortion)),
        target_energy=t_e,
        interference_energy=float(interference @ interference),
        artifact_energy=float(artifact @ artifact),
        flagged=bool(flagged),
    )


def sdr(est, refs, target: int = 0, filter_len: int = 512) -> float:
    """SDR in dB of ``est`` against ``refs[target]``; see :func:`sdr_components`."""
    return sdr_components(est, refs, target, filter_len, decompose_all=False).sdr


@dataclass(frozen=True)
class UtteranceScore:
    utt_id: str
    bucket: str | None
    permutation: tuple  # permutation[s] = estimate index assigned to reference s
    si_snr: tuple
    sdr: tuple = ()

    @property
    def mean_si_snr(self) -> float:
        return math.fsum(self.si_snr) / len(self.si_snr)

    @property
    def mean_sdr(self) -> float:
        return math.fsum(self.sdr) / len(self.sdr) if self.sdr else float("nan")

    def to_row(self) -> str:
        perm = ",".join(str(p + 1) for p in self.permutation)
        fmt = lambda vals: ",".join(repr(float(v)) for v in vals)  # noqa: E731
        return "\t".join([self.utt_id, self.bucket or "-", perm, fmt(self.si_snr), fmt(self.sdr) or "-"])

    @classmethod
    def from_row(cls, line: str) -> "UtteranceScore":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ValueError(f"score row needs 5 tab-separated fields, got {len(parts)}")
        utt, bucket, perm, si, sd = parts
        return cls(
            utt_id=utt,
            bucket=None if bucket == "-" else bucket,
            permutation=tuple(int(p) - 1 for p in perm.split(",")),
            si_snr=tuple(float(v) for v in si.split(",")),
            sdr=() if sd == "-" else tuple(float(v) for v in sd.split(",")),
        )


SCORE_HEADER = "utt_id\tbucket\tpermutation\tsi_snr\tsdr"


def best_permutation(matrix) -> tuple:
    """Assignment maximising the mean of ``matrix[ref, est]``; first one wins ties."""
    matrix = np.asarray(matrix)
    n = matrix.shape[0]
    if n > MAX_PERMUTATION_SOURCES:
        raise ValueError(f"exhaustive permutation search supports at most {MAX_PERMUTATION_SOURCES} sources, got {n}")
    best, best_val = None, -math.inf
    for perm in itertools.permutations(range(n)):
        val = math.fsum(matrix[s, perm[s]] for s in range(n))
        if val > best_val:
            best, best_val = perm, val
    return best


def permute_and_score(ests, refs, utt_id: str = "", bucket: str | None = None,
                      with_sdr: bool = True, filter_len: int = 512) -> UtteranceScore:
    """Pick the estimate-to-reference assignment with the best mean Si-SNR."""
    ests = np.atleast_2d(np.asarray(ests, dtype=np.float64))
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    if ests.shape != refs.shape:
        raise ValueError(f"estimates {ests.shape} and references {refs.shape} differ")
    n = len(refs)
    if n > MAX_PERMUTATION_SOURCES:
        raise ValueError(f"exhaustive permutation search supports at most {MAX_PERMUTATION_SOURCES} sources, got {n}")
    matrix = np.array([[si_snr(ests[e], refs[r]) for e in range(n)] for r in range(n)])
    perm = best_permutation(matrix)
    scores = tuple(float(matrix[s, perm[s]]) for s in range(n))
    sdrs = ()
    if with_sdr:
        sdrs = tuple(sdr(ests[perm[s]], refs, s, filter_len) for s in range(n))
    return UtteranceScore(utt_id, bucket, perm, scores, sdrs)


@dataclass(frozen=True)
class BucketStats:
    count: int
    si_snr: float
    sdr: float


@dataclass(frozen=True)
class Report:
    buckets: dict  # bucket name -> BucketStats, only non-empty buckets
    avg: BucketStats
    label: str = ""
    extra: dict = field(default_factory=dict)

    def columns(self) -> list:
        return [b for b in BUCKET_NAMES if b in self.buckets] + sorted(
            b for b in self.buckets if b not in BUCKET_NAMES)

    def to_dict(self) -> dict:
        def stats(s):
            return {"count": s.count, "si_snr": s.si_snr, "sdr": None if math.isnan(s.sdr) else s.sdr}

        return {
            "label": self.label,
            "buckets": {b: stats(self.buckets[b]) for b in self.columns()},
            "avg": stats(self.avg),
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mean(values) -> float:
    values = list(values)
    if any(math.isnan(v) for v in values):
        return float("nan")
    return math.fsum(values) / len(values)


def aggregate_report(scores, label: str = "") -> Report:
    """Per-bucket means of the per-utterance source-averaged scores.

    Buckets without utterances are left out.  ``math.fsum`` keeps the result
    independent of input order.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    groups: dict = {}
    for sc in scores:
        groups.setdefault(sc.bucket or "-", []).append(sc)
    buckets = {
        b: BucketStats(len(g), _mean(s.mean_si_snr for s in g), _mean(s.mean_sdr for s in g))
        for b, g in groups.items()
    }
    avg = BucketStats(len(scores), _mean(s.mean_si_snr for s in scores), _mean(s.mean_sdr for s in scores))
    return Report(buckets, avg, label)


def format_table(reports, metric: str = "si_snr") -> str:
    """Aligned text table: one row per report, bucket columns then AVG."""
    reports = list(reports)
    cols = []
    for r in reports:
        cols += [c for c in r.columns() if c not in cols]
    cols = [b for b in BUCKET_NAMES if b in cols] + [c for c in cols if c not in BUCKET_NAMES]
    head = ["system"] + cols + ["AVG"]
    rows = []
    for r in reports:
        cells = [r.label or "-"]
        for c in cols:
            st = r.buckets.get(c)
            cells.append("" if st is None else f"{getattr(st, metric):.2f}")
        cells.append(f"{getattr(r.avg, metric):.2f}")
        rows.append(cells)
    counts = ["n"] + [str(max((r.buckets[c].count for r in reports if c in r.buckets), default=0))
                      for c in cols] + [str(max(r.avg.count for r in reports))]
    table = [head] + rows + [counts]
    widths = [max(len(row[i]) for row in table) for i in range(len(head))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in table]
    rule = "-" * len(lines[0])
    return "\n".join([f"[{metric}]", lines[0], rule] + lines[1:-1] + [rule, lines[-1]]) + "\n"
