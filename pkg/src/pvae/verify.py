"""Self-contained oracle suites: every check pits an implementation against an
independent method (finite differences, Monte-Carlo, brute-force counting,
byte-level fixtures, adjoint identities). Used by the ``verify`` CLI command.
"""

from __future__ import annotations

import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import LstmParams, Tensor
from .data import read_idx
from .evaluation import kmeans, weighted_purity
from .gaussian import LOG_2PI, DiagGaussian, kl_divergence, log_prob, rbf_kernel
from .gradcheck import check_grads, rel_err, sampled_param_check
from .networks import ArchConfig, build_model
from .objectives import ObjectiveWeights, draw_noise, total_objective


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rand_lstm(rng, d_in, d_h):
    return LstmParams(
        Tensor(rng.normal(scale=0.4, size=(d_in, 4 * d_h)), requires_grad=True),
        Tensor(rng.normal(scale=0.4, size=(d_h, 4 * d_h)), requires_grad=True),
        Tensor(rng.normal(scale=0.4, size=4 * d_h), requires_grad=True))


def check_primitive_gradients(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    cases = {
        "add": (lambda: (a + b).sum(), [a, b]),
        "sub": (lambda: ((a - b) * (a - b)).sum(), [a, b]),
        "mul": (lambda: (a * b).sum(), [a, b]),
        "exp": (lambda: a.exp().sum(), [a]),
        "log": (lambda: (a * a + 1.0).log().sum(), [a]),
        "tanh": (lambda: (a.tanh() * b).sum(), [a, b]),
        "sigmoid": (lambda: (a.sigmoid() * b).sum(), [a, b]),
        "softplus": (lambda: (a.softplus() * b).sum(), [a, b]),
        "relu": (lambda: ((a + 0.03).relu() * b).sum(), [a, b]),
        "mean": (lambda: (a.mean(axis=-1) * a.mean(axis=-1)).sum(), [a]),
        "concat": (lambda: (ad.concat([a, b], axis=-1)[:, 2:6]
                            * ad.concat([a, b], axis=-1)[:, 2:6]).sum(), [a, b]),
    }
    for fn, ps in cases.values():
        worst = max(worst, check_grads(fn, ps))
    m1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    m2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    worst = max(worst, check_grads(lambda: ad.matmul(m1, m2).sum(), [m1, m2]))
    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
    worst = max(worst, check_grads(
        lambda: (ad.conv2d(x, k) * ad.conv2d(x, k)).sum(), [x, k]))
    y = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
    kt = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
    worst = max(worst, check_grads(
        lambda: (ad.conv2d_transposed(y, kt) * ad.conv2d_transposed(y, kt)).sum(),
        [y, kt]))
    params = _rand_lstm(rng, 4, 6)
    xs = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    h0 = Tensor(np.zeros((2, 6)))
    c0 = Tensor(np.zeros((2, 6)))

    def lstm_loss():
        h, c = ad.lstm_step(xs, h0, c0, params)
        h, c = ad.lstm_step(xs, h, c, params)
        return (h * h).sum() + c.sum()

    worst = max(worst, check_grads(lstm_loss, [*params, xs]))
    return CheckResult("primitive-gradients", worst <= 1e-4,
                       f"worst rel err {worst:.3e} (limit 1e-4)")


def check_total_objective_gradients(n_coords: int = 40, seed: int = 0) -> CheckResult:
    from .data import MultimodalBatch
    arch = ArchConfig(latent_dim_s=3, latent_dim_a=2, latent_dim_i=2,
                      lstm_cells=6, preenc_out=8, audio_feat_dim=4,
                      fc_units=(12, 784))
    model = build_model(arch, seed=seed)
    rng = np.random.default_rng(seed + 1)

    def batch_of(r):
        n, t = 2, 4
        lengths = np.array([t - 1, t])
        audio = np.zeros((n, t, arch.audio_feat_dim))
        mask = np.zeros((n, t))
        for i, L in enumerate(lengths):
            audio[i, :L] = r.uniform(-1, 1, size=(L, arch.audio_feat_dim))
            mask[i, :L] = 1.0
        return MultimodalBatch(audio=audio, audio_lengths=lengths, audio_mask=mask,
                               image=r.uniform(0, 1, size=(n, 1, 28, 28)),
                               identity=np.array([0, 1]),
                               audio_indices=np.arange(n), image_indices=np.arange(n))

    batch = batch_of(rng)
    negatives = batch_of(rng)
    noise = draw_noise(np.random.default_rng(seed + 2), model, batch.size)
    weights = ObjectiveWeights()
    params = list(model.parameters().values())
    worst = sampled_param_check(
        lambda: total_objective(model, batch, negatives, weights, noise).node,
        params, n_coords=n_coords, rng=np.random.default_rng(seed + 3), floor=1e-2)
    return CheckResult("objective-gradients", worst <= 1e-4,
                       f"worst rel err {worst:.3e} over {n_coords} sampled "
                       f"parameters (limit 1e-4)")


def check_kl_monte_carlo(pairs: int = 10, samples: int = 20_000,
                         seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_z = 0.0
    for _ in range(pairs):
        d = int(rng.integers(2, 24))
        q = DiagGaussian(Tensor(rng.normal(size=d)),
                         Tensor(rng.normal(scale=0.7, size=d)))
        p = DiagGaussian(Tensor(rng.normal(size=d)),
                         Tensor(rng.normal(scale=0.7, size=d)))
        z = (q.mean.data + np.exp(0.5 * q.log_var.data)
             * rng.standard_normal((samples, d)))

        def logpdf(z, g):
            return -0.5 * np.sum((z - g.mean.data) ** 2 * np.exp(-g.log_var.data)
                                 + g.log_var.data + LOG_2PI, axis=1)

        draws = logpdf(z, q) - logpdf(z, p)
        se = draws.std(ddof=1) / np.sqrt(samples)
        zscore = abs(kl_divergence(q, p).item() - draws.mean()) / max(se, 1e-12)
        worst_z = max(worst_z, zscore)
    return CheckResult("kl-monte-carlo", worst_z <= 3.0,
                       f"worst |z|-score {worst_z:.2f} over {pairs} pairs "
                       f"(limit 3.0)")


def check_gaussian_spot_values() -> CheckResult:
    ok = True
    detail = []
    v = rbf_kernel(np.array([1.0, 1.0]), np.array([0.0, 0.0])).item()
    if abs(v - np.exp(-1.0)) > 1e-9:
        ok, _ = False, detail.append(f"rbf {v}")
    lp = log_prob(np.array([0.3]), DiagGaussian(Tensor([0.3]), Tensor([0.0]))).item()
    if abs(lp + 0.5 * LOG_2PI) > 1e-9:
        ok, _ = False, detail.append(f"log_prob {lp}")
    kl = kl_divergence(DiagGaussian(Tensor([1.0]), Tensor([0.0])),
                       DiagGaussian(Tensor([0.0]), Tensor([0.0]))).item()
    if abs(kl - 0.5) > 1e-9:
        ok, _ = False, detail.append(f"kl {kl}")
    return CheckResult("gaussian-spot-values", ok,
                       "analytic values exact to 1e-9" if ok else "; ".join(detail))


def check_purity_bruteforce(instances: int = 30, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for i in range(instances):
        n = int(rng.integers(1, 200))
        assign = rng.integers(0, int(rng.integers(1, 12)), size=n)
        labels = rng.integers(0, 10, size=n)
        total = 0
        for c in set(assign.tolist()):
            counts: dict[int, int] = {}
            for a, l in zip(assign, labels):
                if a == c:
                    counts[l] = counts.get(l, 0) + 1
            total += max(counts.values())
        if abs(weighted_purity(assign, labels) - total / n) > 1e-12:
            return CheckResult("purity-bruteforce", False, f"mismatch at case {i}")
    return CheckResult("purity-bruteforce", True,
                       f"{instances} random instances agree exactly")


def check_kmeans_blobs(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [50, 0], [0, 50], [50, 50]], dtype=float)
    pts = np.concatenate([c + 0.5 * rng.normal(size=(30, 2)) for c in centers])
    truth = np.repeat(np.arange(4), 30)
    res = kmeans(pts, k=4, seed=seed)
    purity = weighted_purity(res.assignments, truth)
    return CheckResult("kmeans-blobs", purity == 1.0,
                       f"blob partition purity {purity}")


def check_idx_roundtrip() -> CheckResult:
    rng = np.random.default_rng(1)
    raw = rng.integers(0, 256, size=(2, 28, 28)).astype(np.uint8)
    with tempfile.TemporaryDirectory() as td:
        p = Path(td) / "fixture.idx"
        with open(p, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 2, 28, 28))
            f.write(raw.tobytes())
        back = (read_idx(p) * 255.0).round().astype(np.uint8)
        ok = bool(np.array_equal(back, raw))
        lp = Path(td) / "labels.idx"
        with open(lp, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 3))
            f.write(bytes([1, 2, 3]))
        ok = ok and np.array_equal(read_idx(lp), [1, 2, 3])
    return CheckResult("idx-roundtrip", ok, "byte-exact fixture round trip")


def check_conv_adjoint(instances: int = 8, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 5))
        h = 2 * int(rng.integers(2, 7))
        w = 2 * int(rng.integers(2, 7))
        x = rng.normal(size=(cin, h, w))
        k = rng.normal(size=(cout, cin, 4, 4))
        y = rng.normal(size=(cout, h // 2, w // 2))
        lhs = np.sum(ad.conv2d(Tensor(x), Tensor(k)).data * y)
        rhs = np.sum(x * ad.conv2d_transposed(Tensor(y), Tensor(k)).data)
        worst = max(worst, rel_err(np.asarray(lhs), np.asarray(rhs)))
    return CheckResult("conv-adjoint", worst <= 1e-8,
                       f"worst rel err {worst:.3e} over {instances} instances "
                       f"(limit 1e-8)")


def run_suite(level: str = "fast") -> list[CheckResult]:
    if level not in ("fast", "full"):
        raise ValueError(f"level must be fast|full, got {level!r}")
    full = level == "full"
    return [
        check_primitive_gradients(),
        check_total_objective_gradients(n_coords=120 if full else 40),
        check_kl_monte_carlo(pairs=50 if full else 10,
                             samples=100_000 if full else 20_000),
        check_gaussian_spot_values(),
        check_purity_bruteforce(instances=100 if full else 30),
        check_kmeans_blobs(),
        check_idx_roundtrip(),
        check_conv_adjoint(instances=20 if full else 8),
    ]
