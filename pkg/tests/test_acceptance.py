"""Acceptance suite: one test per release criterion.

Each test prints a single PASS line with the measured quantities once its
assertions hold (run pytest with -s to see them). The desk-scale training
experiment and the ablation echo share one dataset and one full-loss training
run via session fixtures; together they dominate the suite's runtime.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from _oracles import rspu_reference
from rainproto import data as dt
from rainproto import losses as ls
from rainproto import metrics as mt
from rainproto import rspu
from rainproto.data import RAIN_PRESETS, denormalize, normalize, read_ppm, write_ppm
from rainproto.derainnet import derain
from rainproto.gradcheck import COMPOSITE_TOL, ELEMENTARY_TOL, run_suite
from rainproto.losses import LossConfig
from rainproto.numerics import Graph, Tensor, backward
from rainproto.trainer import AdamOptimizer, desk_train_config, load_checkpoint, save_checkpoint, train

TRAIN_SEED = 0
N_TRAIN_SCENES = 40
N_HELD_OUT = 8
FRAMES = 8
SIZE = 32
STEPS = 2000


@pytest.fixture(scope="session")
def desk_dataset():
    train_scenes = [dt.gen_scene(s, SIZE, FRAMES, RAIN_PRESETS["medium"]) for s in range(N_TRAIN_SCENES)]
    held_out = [dt.gen_scene(1000 + s, SIZE, FRAMES, RAIN_PRESETS["medium"]) for s in range(N_HELD_OUT)]
    return train_scenes, held_out


def _held_out_psnrs(model, held_out):
    rainy, clean = [], []
    for scene in held_out:
        for frame in scene.frames:
            out = derain(model, normalize(frame))
            rainy.append(mt.psnr(frame, scene.background))
            clean.append(mt.psnr(denormalize(out.y_hat), scene.background))
    return float(np.mean(rainy)), float(np.mean(clean))


@pytest.fixture(scope="session")
def trained_full(desk_dataset):
    train_scenes, _ = desk_dataset
    cfg = desk_train_config(seed=TRAIN_SEED, steps=STEPS)
    start = time.monotonic()
    model, history = train(train_scenes, cfg)
    elapsed = time.monotonic() - start
    return model, history, elapsed


def test_gradient_suite():
    """Every operator, the prototype unit, all losses, and the end-to-end model."""
    start = time.monotonic()
    results = run_suite(seed=0)
    elapsed = time.monotonic() - start
    failures = [r for r in results if not r.passed]
    assert not failures, "; ".join(f"{r.name}: {r.max_rel_err:.3e}" for r in failures)
    names = {r.name for r in results}
    for required in ("conv2d", "conv_transpose2d", "maxpool2d", "softmax_axis", "vector_l2",
                     "rspu_forward", "cohesion_loss", "divergence_loss", "feature_prototype_loss",
                     "background_consistency", "cross_consistency", "self_consistency",
                     "total_loss", "end_to_end"):
        assert required in names
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f} s"
    worst = max(r.max_rel_err for r in results)
    print(f"\nPASS gradient-suite: {len(results)} checks, worst rel err {worst:.2e}, "
          f"tolerances {ELEMENTARY_TOL:g}/{COMPOSITE_TOL:g}, {elapsed:.1f} s")


def test_rspu_oracle_equivalence():
    """Tensor path vs the independent scalar-loop oracle on 50 random instances."""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        h = int(rng.integers(2, 9))
        w = int(rng.integers(2, 9))
        c = int(rng.integers(2, 5))
        m = int(rng.integers(1, 4))
        x = Tensor(rng.uniform(-1.0, 1.0, (h, w, c)))
        bank = rspu.AttentionBank.create(c, m, rng)
        fused, prototypes, alpha = rspu.rspu_forward(x, bank)
        ref_fused, ref_p, ref_a = rspu_reference(x.data, bank.weight.data, bank.bias.data)
        for got, ref in ((fused.data, ref_fused), (prototypes.data, ref_p), (alpha.data, ref_a)):
            err = float(np.abs(got - ref).max())
            worst = max(worst, err)
            assert err <= 1e-12, f"instance {h}x{w}x{c} M={m}: max abs diff {err:.2e}"
    print(f"\nPASS rspu-oracle: 50 instances up to 8x8x4 M=3, worst abs diff {worst:.2e} <= 1e-12")


def test_prototype_invariants():
    """Convex hull, row stochasticity, permutation equivariance, weight-scale invariance."""
    n = 100
    for seed in range(n):
        rng = np.random.default_rng([seed, 0xACC])
        h, w, c, m = 3, 4, 3, 3
        x = Tensor(rng.uniform(-1.0, 1.0, (h, w, c)))
        bank = rspu.AttentionBank.create(c, m, rng)
        _, prototypes, alpha = rspu.rspu_forward(x, bank)

        flat = x.data.reshape(-1, c)
        assert np.all(prototypes.data >= flat.min(axis=0) - 1e-9)
        assert np.all(prototypes.data <= flat.max(axis=0) + 1e-9)

        np.testing.assert_allclose(alpha.data.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(alpha.data >= 0.0) and np.all(alpha.data <= 1.0)

        perm = rng.permutation(h * w)
        x_perm = Tensor(x.data.reshape(h * w, c)[perm].reshape(h, w, c))
        fused, _, _ = rspu.rspu_forward(x, bank)
        fused_p, prototypes_p, _ = rspu.rspu_forward(x_perm, bank)
        np.testing.assert_allclose(prototypes_p.data, prototypes.data, atol=1e-12)
        np.testing.assert_allclose(fused_p.data.reshape(h * w, c), fused.data.reshape(h * w, c)[perm], atol=1e-12)

        weights = rng.uniform(0.05, 1.0, (h, w, m))
        scales = rng.uniform(0.1, 10.0, m)
        p1 = rspu.form_prototypes(x, Tensor(weights))
        p2 = rspu.form_prototypes(x, Tensor(weights * scales))
        np.testing.assert_allclose(p2.data, p1.data, atol=1e-12)
    print(f"\nPASS prototype-invariants: hull/stochastic/equivariance/scale over {n} instances")


def test_loss_laws():
    cfg = LossConfig()

    # divergence boundaries: 0 once every pairwise distance reaches the margin
    spread = Tensor(np.array([[0.0, 0.0], [3.0, 4.0], [-3.0, 4.0]]))
    assert ls.divergence_loss(spread, cfg.delta).item() == 0.0
    for m in (2, 3, 5):
        collapsed = Tensor(np.tile([0.4, -0.7], (m, 1)))
        assert ls.divergence_loss(collapsed, cfg.delta).item() == pytest.approx(cfg.delta, abs=1e-15)
    for seed in range(100):
        prototypes = Tensor(np.random.default_rng(seed).uniform(-1, 1, (4, 3)))
        value = ls.divergence_loss(prototypes, cfg.delta).item()
        assert 0.0 <= value <= cfg.delta

    # cohesion is exactly zero when every pixel sits on its selected prototype
    prototypes = Tensor(np.random.default_rng(7).uniform(-1, 1, (3, 4)))
    idx = np.array([2, 0, 1, 2, 0, 1])
    x = Tensor(prototypes.data[idx].reshape(2, 3, 4))
    alpha = np.full((6, 3), 0.05)
    alpha[np.arange(6), idx] = 0.9
    assert ls.cohesion_loss(x, prototypes, Tensor(alpha)).item() == 0.0

    # gradient reaches only the selected prototype rows
    feats = Tensor(np.random.default_rng(8).uniform(-1, 1, (2, 2, 3)))
    protos = Tensor(np.random.default_rng(9).uniform(-1, 1, (4, 3)), requires_grad=True)
    one_hot = np.zeros((4, 4))
    one_hot[:, 2] = 1.0
    graph = Graph()
    with graph:
        loss = ls.cohesion_loss(feats, protos, Tensor(one_hot))
    backward(loss, graph)
    np.testing.assert_array_equal(protos.grad[[0, 1, 3]], 0.0)
    assert np.any(protos.grad[2] != 0.0)

    # report reconstruction within 1e-12
    for seed in range(50):
        vals = np.random.default_rng(seed).uniform(0.0, 2.0, 5)
        total, r = ls.total_loss(*(Tensor(float(v)) for v in vals), cfg)
        rebuilt = r.b + cfg.lambda_c * r.c + cfg.lambda_s * r.s + cfg.lambda_f * r.fea
        assert abs(r.total - rebuilt) <= 1e-12
        assert r.total == total.item()

    # published weights: unit terms combine to 1.201
    one = Tensor(1.0)
    zero = Tensor(0.0)
    total, report = ls.total_loss(one, zero, one, one, one, cfg)
    assert report.fea == 1.0
    assert total.item() == pytest.approx(1.201, abs=1e-12)
    print("\nPASS loss-laws: divergence bounds, cohesion zero/stop-gradient, report 1e-12, total 1.201")


def test_metric_oracles():
    base = np.full((16, 16, 3), 0.4)
    assert mt.psnr(base, base + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert mt.psnr(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) == pytest.approx(0.0, abs=1e-12)
    assert math.isinf(mt.psnr(base, base.copy()))

    img = np.random.default_rng(3).uniform(0, 1, (20, 20, 3))
    assert mt.ssim(img, img.copy()) == 1.0

    # constant images 0.2 vs 0.8: luminance term (2*0.16 + 1e-4) / (0.68 + 1e-4)
    closed_form = (2 * 0.2 * 0.8 + 1e-4) / (0.2**2 + 0.8**2 + 1e-4)
    measured = mt.ssim(np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.8))
    assert measured == pytest.approx(closed_form, abs=1e-4)

    other = np.random.default_rng(4).uniform(0, 1, (20, 20, 3))
    assert mt.ssim(img, other) == pytest.approx(mt.ssim(other, img), abs=1e-12)
    print(f"\nPASS metric-oracles: psnr 20.0/0.0/inf, ssim(a,a)=1, constant-pair {measured:.5f}, symmetric")


def test_desk_training_experiment(desk_dataset, trained_full, tmp_path):
    """2000 steps on 40 scenes: loss halves and held-out PSNR improves >= 3 dB."""
    _, held_out = desk_dataset
    model, history, elapsed = trained_full
    assert len(history) == STEPS
    assert elapsed < 1800.0, f"training took {elapsed:.0f} s; budget is one desktop core, 30 min"
    for report in history:
        assert all(np.isfinite(v) for v in (report.coh, report.div, report.fea,
                                            report.b, report.c, report.s, report.total))

    first = float(np.mean([r.total for r in history[:100]]))
    last = float(np.mean([r.total for r in history[-100:]]))
    assert last <= 0.5 * first, f"loss ratio {last / first:.3f} exceeds 0.5"

    rainy, clean = _held_out_psnrs(model, held_out)
    delta = clean - rainy
    assert delta >= 3.0, f"held-out PSNR gain {delta:.2f} dB below +3.0 dB"

    # the eval command must report the same improvement on its mean row
    from rainproto import cli

    dt.write_dataset(held_out, tmp_path / "held_out")
    save_checkpoint(model, AdamOptimizer(model.parameters()), tmp_path / "trained.ckpt")
    import io
    from contextlib import redirect_stdout

    buf = io.StringIO()
    with redirect_stdout(buf):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "trained.ckpt"),
                         "--data", str(tmp_path / "held_out")]) == 0
    mean_row = buf.getvalue().strip().splitlines()[-1].split("\t")
    assert mean_row[0] == "mean"
    assert float(mean_row[3]) > float(mean_row[1]), "eval table does not report a PSNR gain"

    print(f"\nPASS desk-experiment: loss {first:.4f}->{last:.4f} (ratio {last / first:.3f} <= 0.5), "
          f"held-out PSNR {rainy:.2f}->{clean:.2f} dB (+{delta:.2f} >= +3.0), {elapsed:.0f} s")


def test_determinism_and_persistence(desk_dataset, tmp_path):
    train_scenes, _ = desk_dataset
    subset = train_scenes[:6]

    cfg = desk_train_config(seed=5, steps=30)
    train(subset, cfg, checkpoint_path=tmp_path / "a.ckpt")
    train(subset, cfg, checkpoint_path=tmp_path / "b.ckpt")
    identical = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert identical, "repeated runs produced different checkpoints"

    _, full_history = train(subset, desk_train_config(seed=6, steps=40))
    train(subset, desk_train_config(seed=6, steps=20), checkpoint_path=tmp_path / "half.ckpt")
    model, opt = load_checkpoint(tmp_path / "half.ckpt")
    _, tail = train(subset, desk_train_config(seed=6, steps=40), model=model, opt=opt)
    max_dev = max(abs(a.total - b.total) for a, b in zip(tail, full_history[20:]))
    assert max_dev <= 1e-9, f"resumed trajectory deviates by {max_dev:.2e}"

    img = np.random.default_rng(1).uniform(0, 1, (SIZE, SIZE, 3))
    write_ppm(tmp_path / "rt.ppm", img)
    ppm_err = float(np.abs(read_ppm(tmp_path / "rt.ppm") - img).max())
    assert ppm_err <= 1.0 / 255.0
    print(f"\nPASS determinism-persistence: bit-identical checkpoints, resume dev {max_dev:.1e} <= 1e-9, "
          f"ppm round trip {ppm_err:.5f} <= 1/255")


def test_ablation_echo(desk_dataset, trained_full):
    """Dropping the feature prototype loss must strictly lower the held-out gain."""
    train_scenes, held_out = desk_dataset
    full_model, _, _ = trained_full
    cfg = dataclasses.replace(
        desk_train_config(seed=TRAIN_SEED, steps=STEPS), loss=LossConfig(lambda_f=0.0)
    )
    ablated_model, _ = train(train_scenes, cfg)

    rainy, full_clean = _held_out_psnrs(full_model, held_out)
    _, ablated_clean = _held_out_psnrs(ablated_model, held_out)
    full_delta = full_clean - rainy
    ablated_delta = ablated_clean - rainy
    assert ablated_delta < full_delta, (
        f"ablated gain {ablated_delta:.3f} dB is not strictly below full-loss gain {full_delta:.3f} dB"
    )
    print(f"\nPASS ablation-echo: full +{full_delta:.2f} dB > no-feature-loss +{ablated_delta:.2f} dB")
