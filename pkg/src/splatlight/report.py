"""Estimator verification report (the CLI's oracle mode).

Re-derives the stochastic tracers' expectations on the loaded scene and on
canonical micro-cases, checks them against closed-form or exhaustively
enumerated references, prints a pass/fail table, and writes the measurements
as CSV alongside diagnostic matplotlib figures.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .gsmath import Ray
from .tracing import (
    KIND_MISS,
    build_accel,
    estimate_incoming_radiance,
    trace_reference,
    trace_shading_batch,
    trace_shadow_batch,
)


@dataclass
class CheckRow:
    name: str
    expected: float
    measured: float
    tolerance: float

    @property
    def passed(self):
        return abs(self.measured - self.expected) <= self.tolerance


def _ray_batch(ray, n):
    return (np.tile(ray.origin, (n, 1)), np.tile(ray.direction, (n, 1)),
            np.full(n, ray.t_min), np.full(n, ray.t_max))


def _scene_rays(accel, seed, count):
    """Rays aimed at the semi-transparent geometry, where the estimators
    actually have variance; opaque-only and empty directions are dull."""
    gen = np.random.default_rng(seed)
    g = accel.gaussians
    if len(g):
        lo = g.center.min(axis=0)
        hi = g.center.max(axis=0)
        spread = g.scale.max() * 3.0
    elif not accel.is_empty():
        lo = accel.node_min.min(axis=0)
        hi = accel.node_max.max(axis=0)
        spread = 0.1
    else:
        lo, hi = -np.ones(3), np.ones(3)
        spread = 0.1
    center = 0.5 * (lo + hi)
    radius = float(np.linalg.norm(hi - lo)) / 2.0 + 1.0
    rays = []
    for _ in range(count):
        u = gen.normal(size=3)
        u /= np.linalg.norm(u)
        origin = center + u * radius * 1.5
        if len(g):
            target = g.center[int(gen.integers(0, len(g)))] + gen.normal(size=3) * spread
        else:
            target = center + gen.uniform(-0.3, 0.3, 3) * (hi - lo + 1e-6)
        d = target - origin
        d /= np.linalg.norm(d)
        rays.append(Ray(origin, d))
    return rays


def shadow_expectation_check(accel, seed=7, n_rays=24, samples=20_000):
    """Mean stochastic occlusion vs 1 - prod(1 - response) per ray."""
    rows = []
    curves = []
    gen = np.random.default_rng(seed)
    for k, ray in enumerate(_scene_rays(accel, seed, n_rays)):
        hits = trace_reference(accel, ray)
        p = 1.0 - hits.transparency()
        seeds = gen.integers(0, 2**63, samples).astype(np.uint64)
        b, _ = trace_shadow_batch(accel, *_ray_batch(ray, samples), seeds)
        tol = 4.0 * np.sqrt(max(p * (1 - p), 1e-9) / samples) + 1e-3
        rows.append(CheckRow(f"shadow-ray E(b) ray{k}", p, float(b.mean()), tol))
        if k < 3:
            curves.append((p, np.cumsum(b) / np.arange(1, samples + 1)))
    return rows, curves


def shading_law_check(accel_factory, samples=100_000, seed=3):
    """Hit frequencies of the canonical two-Gaussian case vs the selection law."""
    from .geometry import GaussianSet

    cloud = GaussianSet(
        center=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
        scale=np.full((2, 3), 0.3),
        quat=np.tile([1.0, 0, 0, 0], (2, 1)),
        opacity=np.array([0.6, 0.5]),
        albedo=np.full((2, 3), 0.5),
        roughness=np.full(2, 0.8),
        normal=np.tile([0.0, 0, 1], (2, 1)),
        emission=np.array([[1.0, 0, 0], [2.0, 0, 0]]),
    )
    accel = accel_factory(cloud)
    ray = Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0])
    gen = np.random.default_rng(seed)
    seeds = gen.integers(0, 2**63, samples).astype(np.uint64)
    kind, idx, _, _, _ = trace_shading_batch(accel, *_ray_batch(ray, samples), seeds)
    freq = np.array([
        float(np.sum((kind != KIND_MISS) & (idx == 0))) / samples,
        float(np.sum((kind != KIND_MISS) & (idx == 1))) / samples,
        float(np.sum(kind == KIND_MISS)) / samples,
    ])
    expected = np.array([0.6, 0.4 * 0.5, 0.4 * 0.5])
    rows = []
    labels = ["near hit", "far hit", "miss"]
    for lbl, e, m in zip(labels, expected, freq):
        tol = 5.0 * np.sqrt(e * (1 - e) / samples)
        rows.append(CheckRow(f"shading law P({lbl})", float(e), float(m), tol))
    features = np.where(kind == KIND_MISS, 0.0, np.where(idx == 0, 1.0, 2.0))
    rows.append(CheckRow("shading feature mean", 1.0, float(features.mean()), 0.02))
    return rows, (labels, expected, freq)


def incoming_radiance_check(accel, seed=11, n_rays=8, samples=20_000):
    """Stochastic incoming-radiance estimate vs the exhaustive blend."""
    rows = []
    gen = np.random.default_rng(seed)

    def shade(hit):
        return hit.albedo

    def env(direction):
        return np.full(3, 0.25)

    usable = 0
    for ray in _scene_rays(accel, seed + 1, n_rays * 3):
        hits = trace_reference(accel, ray)
        exact = np.full(3, 0.25) * hits.transparency()
        for rec, t_before in zip(hits.records, hits.prefix[:-1]):
            exact = exact + t_before * rec.response * rec.albedo
        est = estimate_incoming_radiance(accel, ray, shade, env, gen, samples,
                                         deterministic_shade=True)
        scale = max(float(np.abs(exact).max()), 1e-3)
        rows.append(CheckRow(
            f"incoming radiance ray{usable}",
            float(exact.mean()), float(est.mean()), 0.02 * scale + 4e-3,
        ))
        usable += 1
        if usable >= n_rays:
            break
    return rows


def max_response_identity_check(accel, seed=5, count=200):
    """Closed-form particle response vs golden-section line maximization."""
    from .gsmath import particle_response

    g = accel.gaussians
    if len(g) == 0:
        return []
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        i = int(gen.integers(0, len(g)))
        prim = g.primitive(i)
        origin = prim.center + gen.normal(size=3) * (3.0 * g.scale[i].max())
        d = gen.normal(size=3)
        d /= np.linalg.norm(d)
        ray = Ray(origin, d)
        resp = particle_response(prim, ray)
        oracle = _golden_line_max(prim, origin, d)
        denom = max(oracle, 1e-12)
        worst = max(worst, abs(resp - oracle) / denom)
    return [CheckRow("max-response identity (rel err)", 0.0, worst, 1e-6)]


def _golden_line_max(prim, origin, d, iters=200):
    from .gsmath import covariance

    inv = np.linalg.inv(covariance(prim))

    def neg_q(t):
        e = origin + t * d - prim.center
        return -0.5 * e @ inv @ e

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = -1e4, 1e4
    c = b - invphi * (b - a)
    dd = a + invphi * (b - a)
    fc, fd = neg_q(c), neg_q(dd)
    for _ in range(iters):
        if fc > fd:
            b, dd, fd = dd, c, fc
            c = b - invphi * (b - a)
            fc = neg_q(c)
        else:
            a, c, fc = c, dd, fd
            dd = a + invphi * (b - a)
            fd = neg_q(dd)
    return prim.opacity * np.exp(neg_q(0.5 * (a + b)))


def throughput_check(accel, seed=13, n_rays=64, samples=200):
    """Anyhit evaluation counts: bias scales and the exhaustive reference."""
    gen = np.random.default_rng(seed)
    rays = _scene_rays(accel, seed, n_rays)
    ref_evals = []
    evals = {1.0: [], 0.2: []}
    shadow_means = {1.0: [], 0.2: []}
    for ray in rays:
        _, ev = trace_reference(accel, ray, with_evals=True)
        ref_evals.append(ev)
        for scale in (1.0, 0.2):
            seeds = gen.integers(0, 2**63, samples).astype(np.uint64)
            _, _, _, _, e = trace_shading_batch(
                accel, *_ray_batch(ray, samples), seeds, scale=scale)
            evals[scale].append(e.mean())
            b, _ = trace_shadow_batch(
                accel, *_ray_batch(ray, samples), seeds, scale=scale)
            shadow_means[scale].append(b.mean())
    ref = float(np.mean(ref_evals))
    # one-sided checks encoded as violations (expected 0)
    rows = [
        CheckRow("anyhit evals s=0.2 exceed s=1.0 (violation)", 0.0,
                 max(0.0, float(np.mean(evals[0.2]) - np.mean(evals[1.0]))), 0.0),
        CheckRow("shadow mean drop at s=0.2 (violation)", 0.0,
                 max(0.0, float(np.mean(shadow_means[1.0]) - np.mean(shadow_means[0.2]))),
                 0.02),
    ]
    if ref > 0:
        rows.append(CheckRow("stochastic/reference eval ratio excess", 0.0,
                             max(0.0, float(np.mean(evals[1.0])) / ref - 1.0), 0.0))
    stats = {
        "reference": ref,
        "s1.0": float(np.mean(evals[1.0])),
        "s0.2": float(np.mean(evals[0.2])),
    }
    return rows, stats


def run_oracle_report(scene, out_prefix=None, verbose_print=print):
    """Run every estimator check; returns (rows, all_passed).

    With ``out_prefix``, writes ``<prefix>_oracle.csv`` and the diagnostic
    figures next to it.
    """
    accel = scene.accel() if hasattr(scene, "accel") else build_accel(scene)
    rows = []
    shadow_rows, shadow_curves = shadow_expectation_check(accel)
    rows += shadow_rows
    law_rows, law_data = shading_law_check(lambda cloud: build_accel(cloud))
    rows += law_rows
    rows += incoming_radiance_check(accel)
    rows += max_response_identity_check(accel)
    tp_rows, tp_stats = throughput_check(accel)
    rows += tp_rows

    name_w = max(len(r.name) for r in rows) + 2
    verbose_print(f"{'check'.ljust(name_w)}{'expected':>12}{'measured':>12}"
                  f"{'tol':>10}  status")
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        verbose_print(f"{r.name.ljust(name_w)}{r.expected:>12.5f}"
                      f"{r.measured:>12.5f}{r.tolerance:>10.2e}  {status}")
    ok = all(r.passed for r in rows)
    verbose_print(f"oracle: {'all checks passed' if ok else 'CHECKS FAILED'}")

    if out_prefix:
        os.makedirs(os.path.dirname(out_prefix) or ".", exist_ok=True)
        with open(f"{out_prefix}_oracle.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["check", "expected", "measured", "tolerance", "passed"])
            for r in rows:
                writer.writerow([r.name, r.expected, r.measured, r.tolerance,
                                 r.passed])
        _write_figures(out_prefix, shadow_curves, law_data, tp_stats)
    return rows, ok


def _write_figures(prefix, shadow_curves, law_data, tp_stats):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if shadow_curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, (p, curve) in enumerate(shadow_curves):
            step = max(1, len(curve) // 2000)
            ax.plot(np.arange(1, len(curve) + 1)[::step], curve[::step],
                    label=f"ray {i} estimate")
            ax.axhline(p, linestyle="--", linewidth=0.8)
        ax.set_xlabel("samples")
        ax.set_ylabel("mean occlusion")
        ax.set_title("Stochastic shadow estimator vs closed form")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(f"{prefix}_shadow_convergence.png", dpi=120)
        plt.close(fig)

    labels, expected, freq = law_data
    fig, ax = plt.subplots(figsize=(5, 4))
    x = np.arange(len(labels))
    ax.bar(x - 0.18, expected, width=0.36, label="selection law")
    ax.bar(x + 0.18, freq, width=0.36, label="empirical")
    ax.set_xticks(x, labels)
    ax.set_ylabel("probability")
    ax.set_title("Shading-ray hit distribution")
    ax.legend()
    fig.tight_layout()
    fig.savefig(f"{prefix}_hit_law.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    names = ["reference", "stochastic s=1.0", "stochastic s=0.2"]
    vals = [tp_stats["reference"], tp_stats["s1.0"], tp_stats["s0.2"]]
    ax.bar(names, vals)
    ax.set_ylabel("mean anyhit evaluations per ray")
    ax.set_title("Tracing throughput")
    fig.tight_layout()
    fig.savefig(f"{prefix}_throughput.png", dpi=120)
    plt.close(fig)
