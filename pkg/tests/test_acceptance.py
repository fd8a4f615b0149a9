"""End-to-end acceptance gates.

Each test exercises one hard requirement at its stated tolerance and
prints a single PASS/FAIL line (written past pytest's capture so the
lines always reach the terminal). Tolerances here are contractual: do
not loosen them.
"""

import contextlib
import io
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from flowad import flow_core, mvg_baseline, scoring, training
from flowad.cli import _jacobian_gap, main
from flowad.errors import FlowadError
from flowad.feature_store import (DatasetManifest, FeaturePyramid,
                                  ManifestEntry, load_manifest, read_pyramid,
                                  write_manifest, write_pyramid)
from flowad.flow_core import ScaleDecoder, build_flow_model, positional_encoding
from flowad.numerics import GradTape, Tensor, backward
from flowad.training import TrainConfig, Trainer


_CAPSYS = None


@pytest.fixture(autouse=True)
def _reporter(capsys):
    global _CAPSYS
    _CAPSYS = capsys
    yield
    _CAPSYS = None


def report(name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    if _CAPSYS is not None:
        with _CAPSYS.disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
    assert passed, line


def randomized_decoder(dim, cond_dim, layers, seed, noise=0.3):
    dec = ScaleDecoder(dim=dim, cond_dim=cond_dim, num_layers=layers,
                       perm_seed=seed)
    rng = np.random.default_rng(seed + 10_000)
    dec.set_parameters(dec.get_parameters()
                       + noise * rng.standard_normal(dec.parameter_count))
    return dec


def quiet_cli(args):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(args)
    return code, buf.getvalue()


# ---------------------------------------------------------------------------
# 1. log-density-gap identity
# ---------------------------------------------------------------------------

def test_acceptance_mahalanobis_identity():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    tuples = 0
    for dim in (2, 4, 8):
        dec = randomized_decoder(dim, 8, 4, seed=dim)
        for trial in range(400):
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            cov = (q * rng.uniform(0.5, 2.0, size=dim)) @ q.T
            target = mvg_baseline.MvgPosition(
                mean=rng.standard_normal(dim),
                chol=np.linalg.cholesky(cov))
            _, _, gap = mvg_baseline.reverse_kl_identity_check(
                dec, target, rng.standard_normal(dim),
                rng.standard_normal(8))
            worst = max(worst, gap)
            tuples += 1
    elapsed = time.time() - t0
    report("mahalanobis identity",
           worst < 1e-8 and tuples >= 1000 and elapsed < 60,
           f"worst gap {worst:.3e} over {tuples} tuples "
           f"(tolerance 1e-8, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 2. Jacobian log-determinant exactness
# ---------------------------------------------------------------------------

def test_acceptance_jacobian_logdet():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for dim in (2, 4, 6):
        for layers in (1, 4, 8):
            dec = randomized_decoder(dim, 4, layers, seed=dim * 10 + layers)
            for _ in range(4):
                gap = _jacobian_gap(dec, rng.standard_normal(dim),
                                    rng.standard_normal(4))
                worst = max(worst, gap)
    elapsed = time.time() - t0
    report("jacobian log-det", worst < 1e-4 and elapsed < 60,
           f"worst relative error {worst:.3e} "
           f"(tolerance 1e-4, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 3. bijectivity
# ---------------------------------------------------------------------------

def test_acceptance_bijectivity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for dim in (2, 4, 16, 64):
        for layers in (1, 4, 8):
            dec = randomized_decoder(dim, 8, layers, seed=dim + layers,
                                     noise=0.1)
            z = rng.standard_normal((100, dim))
            c = rng.standard_normal((100, 8))
            u, ld_inv = dec.inverse(z, c)
            z2, ld_fwd = dec.forward(u, c)
            worst = max(worst, float(np.abs(z2 - z).max()),
                        float(np.abs(ld_inv + ld_fwd).max()))
    report("bijectivity", worst < 1e-8,
           f"worst reconstruction/log-det gap {worst:.3e} (tolerance 1e-8)")


# ---------------------------------------------------------------------------
# 4. loss gradient correctness
# ---------------------------------------------------------------------------

def test_acceptance_loss_gradient():
    from flowad.cli import _loss_grad_gap
    worst = 0.0
    for point in range(20):
        rng = np.random.default_rng(100 + point)
        dec = randomized_decoder(4, 4, 2, seed=200 + point, noise=0.3)
        worst = max(worst, _loss_grad_gap(dec, rng))
    report("loss gradient", worst < 1e-6,
           f"worst relative error {worst:.3e} over 20 parameter points "
           f"(tolerance 1e-6)")


# ---------------------------------------------------------------------------
# 5. density normalization
# ---------------------------------------------------------------------------

def _train_decoder_on_gaussian(dim, seed, epochs=30):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(np.eye(dim) * 1.5 + 0.3 * np.ones((dim, dim))) \
        if dim > 1 else np.array([[1.3]])
    pyramids = [
        FeaturePyramid(image_id=f"g{i}", scales=[
            (rng.standard_normal((4, 4, dim)) @ chol.T) + 0.5])
        for i in range(8)]
    model = build_flow_model([dim], cond_dim=8, num_layers=4, seed=seed)
    config = TrainConfig(learning_rate=2e-3, epochs=epochs, image_batch=8,
                         vector_batch=128, warmup_epochs=2, seed=seed)
    Trainer(model, pyramids, config).train()
    return model.decoders[0]


def test_acceptance_density_normalization():
    results = []
    # 1-D flow: quadrature over [-6, 6]
    dec1 = _train_decoder_on_gaussian(1, seed=3)
    c = positional_encoding(1, 2, 8).reshape(1, -1)
    xs = np.linspace(-6.0, 6.0, 4001)
    ll = dec1.log_likelihood(xs.reshape(-1, 1), np.repeat(c, xs.size, axis=0))
    integral1 = float(np.trapezoid(np.exp(ll), xs))
    results.append(integral1)

    # 2-D flow: tensor-grid quadrature over [-6, 6]^2
    dec2 = _train_decoder_on_gaussian(2, seed=4)
    n = 241
    axis = np.linspace(-6.0, 6.0, n)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    ll = dec2.log_likelihood(pts, np.repeat(c, pts.shape[0], axis=0))
    dens = np.exp(ll).reshape(n, n)
    integral2 = float(np.trapezoid(np.trapezoid(dens, axis, axis=1), axis))
    results.append(integral2)

    worst = max(abs(r - 1.0) for r in results)
    report("density normalization", worst < 1e-2,
           f"integrals 1-D {results[0]:.6f}, 2-D {results[1]:.6f} "
           f"(tolerance 1 +/- 1e-2)")


# ---------------------------------------------------------------------------
# 6. training optimum on N(0, I)
# ---------------------------------------------------------------------------

def test_acceptance_training_optimum(tmp_path):
    t0 = time.time()
    data = tmp_path / "data"
    code, _ = quiet_cli(["synth", "--out", str(data), "--seed", "5",
                         "--n-train", "16", "--n-test-good", "1",
                         "--n-test-anom", "1", "--scales", "8x8x2",
                         "--image-size", "64", "--patch-min", "2",
                         "--patch-max", "4", "--mean-amplitude", "0",
                         "--unit-covariance"])
    assert code == 0
    out = tmp_path / "run"
    code, _ = quiet_cli(["train", "--data", str(data), "--out", str(out),
                         "--epochs", "100", "--warmup-epochs", "2",
                         "--condition-dim", "8", "--layers", "4",
                         "--image-batch", "16", "--vector-batch", "1024"])
    assert code == 0
    rows = [line.split(",") for line
            in (out / "loss.csv").read_text().splitlines()[1:]]
    final = float(rows[-1][2])
    first = float(rows[0][2])
    elapsed = time.time() - t0
    report("training optimum",
           abs(final - 1.0) < 0.1 and final <= first and elapsed < 300,
           f"final loss {final:.4f} vs analytic optimum 1.0 "
           f"(tolerance 0.1, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# 7. synthetic anomaly-detection benchmark
# ---------------------------------------------------------------------------

TRAIN_FLAGS = ["--layers", "4", "--epochs", "12", "--warmup-epochs", "2",
               "--lr", "2e-3", "--image-batch", "32",
               "--vector-batch", "2048"]


def _bench_metrics(tmp_path, tag, synth_extra, train_extra):
    data = tmp_path / f"data_{tag}"
    code, _ = quiet_cli(["synth", "--out", str(data), "--seed", "0",
                         "--n-train", "32"] + synth_extra)
    assert code == 0
    run = tmp_path / f"run_{tag}"
    code, _ = quiet_cli(["train", "--data", str(data), "--out", str(run)]
                        + TRAIN_FLAGS + train_extra)
    assert code == 0
    out = tmp_path / f"eval_{tag}"
    code, _ = quiet_cli(["eval", "--data", str(data), "--out", str(out),
                         "--checkpoint", str(run / "checkpoint.cfck")])
    assert code == 0
    row = (out / "report.csv").read_text().splitlines()[1].split(",")
    return float(row[1]), float(row[2]), float(row[3])


def test_acceptance_synthetic_benchmark(tmp_path):
    t0 = time.time()
    _, cflow_px, cflow_pro = _bench_metrics(
        tmp_path, "cflow", [], ["--condition-dim", "16"])
    _, uflow_px, _ = _bench_metrics(
        tmp_path, "uflow", [], ["--no-condition"])
    _, null_px, _ = _bench_metrics(
        tmp_path, "null", ["--shift", "0"], ["--condition-dim", "16"])
    elapsed = time.time() - t0
    ok = (cflow_px >= 0.95 and cflow_pro >= 0.90
          and cflow_px >= uflow_px - 0.005
          and abs(null_px - 0.5) <= 0.05
          and elapsed < 900)
    report("synthetic benchmark", ok,
           f"cflow pixel auroc {cflow_px:.4f} (>= 0.95), "
           f"aupro {cflow_pro:.4f} (>= 0.90), "
           f"uflow pixel auroc {uflow_px:.4f} (gap tolerance 0.005), "
           f"null pixel auroc {null_px:.4f} (0.5 +/- 0.05), "
           f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8. metric oracles
# ---------------------------------------------------------------------------

def test_acceptance_metric_oracles():
    from flowad.metrics import aupro, auroc
    from flowad.scoring import f1_threshold
    from tests.test_metrics import exhaustive_aupro, pair_count_auroc
    from tests.test_scoring import exhaustive_f1

    rng = np.random.default_rng(6)
    worst_auroc = 0.0
    cases = 0
    while cases < 100:
        n = int(rng.integers(4, 201))
        scores = np.round(rng.uniform(0, 1, n), 2)
        labels = rng.uniform(size=n) < 0.5
        if labels.all() or not labels.any():
            continue
        worst_auroc = max(worst_auroc, abs(
            auroc(scores, labels) - pair_count_auroc(scores, labels)))
        cases += 1

    worst_aupro = 0.0
    for trial in range(10):
        mask = np.zeros((8, 8), dtype=int)
        h0, w0 = rng.integers(0, 5, size=2)
        mask[h0:h0 + 3, w0:w0 + 3] = 1
        smap = np.round(rng.uniform(0, 1, (8, 8)), 1) + mask * rng.uniform()
        worst_aupro = max(worst_aupro, abs(
            aupro([smap], [mask]) - exhaustive_aupro([smap], [mask])))

    f1_exact = True
    for trial in range(30):
        n = int(rng.integers(4, 60))
        scores = np.round(rng.uniform(0, 1, n), 2)
        labels = rng.uniform(size=n) < 0.4
        if labels.all() or not labels.any():
            continue
        tau, f1 = f1_threshold(scores, labels.astype(int))
        tau_ref, f1_ref = exhaustive_f1(scores, labels)
        f1_exact = f1_exact and tau == tau_ref and f1 == f1_ref

    ok = worst_auroc < 1e-12 and worst_aupro < 1e-9 and f1_exact
    report("metric oracles", ok,
           f"auroc gap {worst_auroc:.2e} (tolerance 1e-12), "
           f"aupro gap {worst_aupro:.2e} (tolerance 1e-9), "
           f"f1 sweep exact: {f1_exact}")


# ---------------------------------------------------------------------------
# 9. model size vs spatial resolution
# ---------------------------------------------------------------------------

def test_acceptance_complexity_claim(tmp_path):
    sizes = {}
    for tag, grid in (("small", "8x8x4"), ("large", "32x32x4")):
        data = tmp_path / f"d_{tag}"
        code, _ = quiet_cli(["synth", "--out", str(data), "--seed", "0",
                             "--n-train", "8", "--n-test-good", "1",
                             "--n-test-anom", "1", "--scales", grid,
                             "--image-size", "64", "--patch-min", "2",
                             "--patch-max", "4"])
        assert code == 0
        for kind in ("flow", "mvg"):
            run = tmp_path / f"r_{tag}_{kind}"
            train = ["train", "--data", str(data), "--out", str(run)]
            if kind == "mvg":
                train += ["--model", "mvg"]
            else:
                train += ["--epochs", "1", "--warmup-epochs", "0",
                          "--layers", "2", "--condition-dim", "8",
                          "--image-batch", "4", "--vector-batch", "64"]
            code, _ = quiet_cli(train)
            assert code == 0
            bench = tmp_path / f"b_{tag}_{kind}"
            code, _ = quiet_cli(
                ["bench", "--data", str(data),
                 "--checkpoint", str(run / "checkpoint.cfck"),
                 "--out", str(bench), "--iters", "2"])
            assert code == 0
            row = [l for l in (bench / "bench.csv").read_text().splitlines()
                   if l.startswith("param_bytes,")][0]
            sizes[(tag, kind)] = int(row.split(",")[1])

    flow_constant = sizes[("small", "flow")] == sizes[("large", "flow")]
    mvg_ratio = sizes[("large", "mvg")] / sizes[("small", "mvg")]
    ok = flow_constant and mvg_ratio == 16.0
    report("complexity claim", ok,
           f"flow bytes {sizes[('small', 'flow')]} == "
           f"{sizes[('large', 'flow')]} across 8x8 vs 32x32; "
           f"mvg bytes grow x{mvg_ratio:g} (required exactly 16)")


# ---------------------------------------------------------------------------
# 10. format safety under fuzzing
# ---------------------------------------------------------------------------

def test_acceptance_format_safety(tmp_path):
    rng = np.random.default_rng(7)
    pyramid_path = tmp_path / "p.cfpd"
    write_pyramid(pyramid_path, FeaturePyramid(
        image_id="fuzz",
        scales=[rng.standard_normal((2, 3, 4))
                .astype(np.float32).astype(np.float64)]))
    pyramid_bytes = pyramid_path.read_bytes()

    manifest_path = tmp_path / "m.tsv"
    write_manifest(manifest_path, DatasetManifest(
        name="fuzz", image_size=(8, 8), masks_available=False,
        entries=[ManifestEntry("a", "train", "good"),
                 ManifestEntry("b", "test", "anomalous")]))
    manifest_bytes = manifest_path.read_bytes()

    crashes = 0
    cases = 0
    for trial in range(1000):
        target_pyramid = trial % 2 == 0
        base = pyramid_bytes if target_pyramid else manifest_bytes
        mutated = bytearray(base)
        op = trial % 4
        if op == 0:
            mutated = mutated[:rng.integers(0, len(base))]
        elif op == 1:
            for _ in range(int(rng.integers(1, 6))):
                mutated[rng.integers(0, len(mutated))] = rng.integers(0, 256)
        elif op == 2:
            mutated += bytes(rng.integers(0, 256, size=rng.integers(1, 40),
                                          dtype=np.uint8))
        else:
            mutated = bytearray(rng.integers(0, 256,
                                             size=rng.integers(0, 120),
                                             dtype=np.uint8))
        path = tmp_path / ("f.cfpd" if target_pyramid else "f.tsv")
        path.write_bytes(bytes(mutated))
        cases += 1
        try:
            if target_pyramid:
                read_pyramid(path)
            else:
                load_manifest(path)
        except FlowadError:
            pass
        except Exception:
            crashes += 1
    report("format safety", crashes == 0 and cases == 1000,
           f"{cases} fuzz cases, {crashes} uncontrolled crashes "
           f"(required 0)")
