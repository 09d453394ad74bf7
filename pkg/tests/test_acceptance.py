"""Acceptance suite: one test (or group of tests) per numbered criterion.

A PASS/FAIL/SKIP line per criterion is printed in the terminal summary
(see ``pytest_terminal_summary`` in conftest.py). Criteria that need the
real Omniglot or mini-Imagenet data read their location from
``OMNIGLOT_ROOT`` / ``MINI_IMAGENET_ROOT`` and skip when it is absent.
"""

import copy
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from rpnet import (DiscriminatorOutput, EvalConfig, Generator, SrpnConfig, TrainConfig,
                   build_siam1, build_siam2, build_srpn, discriminator_loss,
                   embedding_asymmetry, generator_loss, load_image_folder, load_omniglot,
                   make_split, pixel_distance_scorer, run_protocol, sample_pair_batch,
                   similarity_loss, synthetic_blobs, synthetic_glyphs, train_similarity)
from rpnet.config import load_preset
from rpnet.data import ClassSplit
from rpnet.models import SAME
from rpnet.training import (CollapseWarning, adversarial_step, frozen, new_adversarial_state,
                            pair_accuracy)


def data_root(var):
    value = os.environ.get(var)
    if not value or not Path(value).is_dir():
        pytest.skip(f"{var} is not set to a dataset directory")
    return Path(value)


# ---------------------------------------------------------------- 1. pixel baseline, Omniglot

def test_criterion_01_pixel_baseline_omniglot():
    ds = load_omniglot(data_root("OMNIGLOT_ROOT"))
    split = make_split(ds, 1200, 0)
    start = time.perf_counter()
    rep = run_protocol(pixel_distance_scorer, ds, split.test, EvalConfig.omniglot_reference())
    elapsed = time.perf_counter() - start
    assert rep.total == 4000
    assert abs(rep.accuracy - 0.267) <= 0.04, rep.accuracy
    assert elapsed < 300, elapsed


# ---------------------------------------------------------------- 2. pixel baseline, mini-Imagenet

@pytest.mark.parametrize("k_shot,target", [(1, 0.23), (5, 0.26)])
def test_criterion_02_pixel_baseline_mini_imagenet(k_shot, target):
    ds = load_image_folder(data_root("MINI_IMAGENET_ROOT"))
    split = make_split(ds, 80, 0)
    rep = run_protocol(pixel_distance_scorer, ds, split.test,
                       EvalConfig.mini_imagenet_reference(k_shot=k_shot))
    assert abs(rep.accuracy - target) <= 0.03, rep.accuracy


# ---------------------------------------------------------------- 3. chance and oracle scorers

def _labelled(num_classes=25, per_class=4):
    rng = np.random.default_rng(0)
    images = []
    for c in range(num_classes):
        arr = rng.random((per_class, 1, 4, 4)).astype(np.float32)
        arr[:, 0, 0, 0] = c
        images.append(arr)
    from rpnet.data import Dataset
    return Dataset(images)


def test_criterion_03_random_scorer_is_at_chance():
    ds = _labelled()
    rng = np.random.default_rng(2024)
    rep = run_protocol(lambda q, e: rng.random(len(q)), ds, range(25),
                       EvalConfig(20, 1, 200, 20, seed=0))
    assert rep.total == 4000
    assert abs(rep.accuracy - 0.05) <= 0.015, rep.accuracy


def test_criterion_03_oracle_scorer_is_perfect():
    ds = _labelled()
    oracle = lambda q, e: (np.asarray(q)[:, 0, 0, 0] == np.asarray(e)[:, 0, 0, 0]).astype(float)
    rep = run_protocol(oracle, ds, range(25), EvalConfig(20, 1, 200, 20, seed=0))
    assert rep.accuracy == 1.0


# ---------------------------------------------------------------- 4. gradient verification

FD_STEP = 1e-6
SAMPLES = 100


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradient_check(loss_fn, params, seed=0):
    """Analytic gradient of ``loss_fn()`` against central differences on sampled entries."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    sizes = [p.numel() for p in params]
    rng = np.random.default_rng(seed)
    picks = rng.choice(sum(sizes), size=min(SAMPLES, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    errors = []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, j = params[i], int(flat - offsets[i])
        analytic = float(p.grad.reshape(-1)[j])
        view = p.data.reshape(-1)
        orig = float(view[j])
        with torch.no_grad():
            view[j] = orig + FD_STEP
            up = float(loss_fn())
            view[j] = orig - FD_STEP
            down = float(loss_fn())
            view[j] = orig
        errors.append(relative_error(analytic, (up - down) / (2 * FD_STEP)))
    return np.array(errors)


def assert_gradients_match(errors):
    within = float(np.mean(errors <= 1e-6))
    assert within >= 0.95, f"only {within:.0%} within 1e-6; worst {errors.max():.2e}"
    assert errors.max() <= 1e-4, f"worst relative error {errors.max():.2e}"


def gradient_inputs(num=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(num, 1, 8, 8, generator=g, dtype=torch.float64)
    x_t = torch.rand(num, 1, 8, 8, generator=g, dtype=torch.float64)
    y = torch.tensor([1, 0] * (num // 2))
    return x, x_t, y


@pytest.fixture
def grad_models(float64):
    # Batch-statistics BN is a deterministic function of the batch; running
    # stats at init would shrink activations until roundoff dominates.
    torch.manual_seed(0)
    siam = build_siam1((1, 8, 8), (4, 4, 8, 8, 8)).train()
    srpn = build_srpn(SrpnConfig(channels=(4, 4, 8, 8), strides=(1, 2, 1, 2), shared_depth=1,
                                 split_blocks=3, stem_channels=4, embedding_dim=8)).train()
    disc = build_siam1((1, 8, 8), (4, 4, 8, 8, 8), n_outputs=3).train()
    gen = Generator((1, 8, 8), widths=(4, 8, 8)).train()
    return siam, srpn, disc, gen


def test_criterion_04_gradients_siam1(grad_models):
    siam = grad_models[0]
    x, x_t, y = gradient_inputs()
    assert_gradients_match(gradient_check(lambda: similarity_loss(siam(x, x_t), y),
                                          siam.parameters()))


def test_criterion_04_gradients_srpn(grad_models):
    srpn = grad_models[1]
    x, x_t, y = gradient_inputs()
    assert_gradients_match(gradient_check(lambda: similarity_loss(srpn(x, x_t), y),
                                          srpn.parameters()))


def test_criterion_04_gradients_discriminator(grad_models):
    _, _, disc, gen = grad_models
    x, x_t, y = gradient_inputs()
    with torch.no_grad():
        fake = gen(x_t)

    def loss():
        real = DiscriminatorOutput.from_logits(disc(x, x_t))
        gen_out = DiscriminatorOutput.from_logits(disc(fake, x_t))
        return discriminator_loss(real, y, gen_out)

    assert_gradients_match(gradient_check(loss, disc.parameters()))


def test_criterion_04_gradients_generator(grad_models):
    _, _, disc, gen = grad_models
    _, x_t, _ = gradient_inputs()
    with frozen(disc):
        errors = gradient_check(
            lambda: generator_loss(DiscriminatorOutput.from_logits(disc(gen(x_t), x_t))),
            gen.parameters())
    assert_gradients_match(errors)


# ---------------------------------------------------------------- 5. loss oracles

def test_criterion_05_loss_oracles():
    rng = np.random.default_rng(5)
    floor = 1e-7
    for n_real in range(1, 6):
        logits = rng.normal(0, 2, (6, 3))
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        y = rng.integers(0, 2, n_real)
        want = (np.mean([-math.log(max(p[i, SAME if y[i] else 0], floor)) for i in range(n_real)])
                + np.mean([-math.log(max(p[i, 2], floor)) for i in range(n_real, 6)]))
        got = discriminator_loss(DiscriminatorOutput(torch.tensor(p[:n_real])), torch.tensor(y),
                                 DiscriminatorOutput(torch.tensor(p[n_real:])))
        assert abs(float(got) - want) <= 1e-9
    z = rng.normal(0, 3, 64)
    labels = rng.integers(0, 2, 64)
    sp = lambda v: math.log1p(math.exp(v))
    want = np.mean([sp(-v) if t else sp(v) for v, t in zip(z, labels)])
    assert abs(float(similarity_loss(torch.tensor(z), torch.tensor(labels))) - want) <= 1e-9


# ---------------------------------------------------------------- 6. overfit smoke

def test_criterion_06_siam1_overfits_200_pairs():
    ds = load_omniglot(data_root("OMNIGLOT_ROOT"))
    split = make_split(ds, 1200, 0)
    classes = split.train[:10]
    pairs = sample_pair_batch(ds, classes, 200, np.random.default_rng(0))
    torch.manual_seed(0)
    model = build_siam1((1, 28, 28))
    cfg = TrainConfig(total_updates=2000, batch_size=128, l2_init=0.0, l2_late=0.0,
                      augment=False, eval_interval=100, early_stop_patience=10**6, seed=0)
    start = time.perf_counter()
    reached = {}

    def stop_when_fit(state):
        if state.step % 50 == 0 and pair_accuracy(model, pairs) >= 0.99:
            reached["step"] = state.step
            state.stopped_early = True

    train_similarity(model, ds, ClassSplit(classes, (), ()), cfg, fixed_pairs=pairs,
                     callback=stop_when_fit)
    elapsed = time.perf_counter() - start
    assert "step" in reached, f"train pair accuracy {pair_accuracy(model, pairs):.3f}"
    assert elapsed < 300, elapsed


# ---------------------------------------------------------------- 7. SRPN structure

def test_criterion_07_srpn_structure():
    torch.manual_seed(0)
    srpn = build_srpn(SrpnConfig()).eval()
    g = torch.Generator().manual_seed(1)
    x, x_t = torch.rand(8, 1, 28, 28, generator=g), torch.rand(8, 1, 28, 28, generator=g)
    assert embedding_asymmetry(srpn, x.numpy(), x_t.numpy()) > 0
    with torch.no_grad():
        hx = srpn.encoder.pathways(x, x_t)[0][0]
        hx2 = srpn.encoder.pathways(x, x_t + 0.1 * torch.randn(x_t.shape, generator=g))[0][0]
    assert (hx - hx2).abs().max() > 0
    for m in (build_siam1((1, 28, 28)), build_siam2((1, 28, 28))):
        assert embedding_asymmetry(m.eval(), x.numpy(), x_t.numpy()) == 0.0


# ---------------------------------------------------------------- 8. GR smoke

GR_STEPS = 500


@pytest.fixture(scope="module")
def gr_run():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(0)
        ds = synthetic_blobs(per_class=64, size=8)
        disc = build_siam1((1, 8, 8), (8, 8, 16, 16, 16), n_outputs=3)
        gen = Generator((1, 8, 8), widths=(8, 16, 16))
        cfg = TrainConfig(lr_init=2e-4, lr_final=2e-4, total_updates=GR_STEPS, batch_size=32,
                          beta1=0.5, l2_init=0.0, l2_late=0.0, augment=False, seed=0)
        state = new_adversarial_state(gen, disc, cfg)
        isolation = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CollapseWarning)
            for step in range(GR_STEPS):
                if step % 100 == 0:
                    isolation.append(_isolation_probe(state, ds))
                adversarial_step(state, ds, (0, 1))
        return state, isolation
    finally:
        torch.set_default_dtype(prev)


def _isolation_probe(state, ds):
    """Run each half-step on a throwaway copy and report whether the other network moved."""
    from rpnet.training import adversarial_batch, discriminator_update, generator_update
    probe = copy.deepcopy(state)
    batch = adversarial_batch(probe, ds, (0, 1))
    probe.gen.train()
    fake = probe.gen(batch.x_tilde)
    gen_before = {k: v.clone() for k, v in probe.gen.state_dict().items()}
    discriminator_update(probe, batch, fake)
    gen_kept = all(torch.equal(v, probe.gen.state_dict()[k]) for k, v in gen_before.items())
    disc_before = {k: v.clone() for k, v in probe.disc.state_dict().items()}
    generator_update(probe, batch, fake)
    disc_kept = all(torch.equal(v, probe.disc.state_dict()[k]) for k, v in disc_before.items())
    return gen_kept and disc_kept


def test_criterion_08_gr_runs_without_nan(gr_run):
    state, _ = gr_run
    assert len(state.losses_gen) == GR_STEPS
    assert np.all(np.isfinite(state.losses_gen)) and np.all(np.isfinite(state.losses_dis))


def test_criterion_08_gr_parameter_isolation(gr_run):
    _, isolation = gr_run
    assert isolation and all(isolation)


def test_criterion_08_gr_generator_loss_decreases(gr_run):
    state, _ = gr_run
    initial = state.losses_gen[0]
    final = float(np.mean(state.losses_gen[-20:]))
    assert final < initial, f"generator loss went from {initial:.4f} to {final:.4f}"


# ---------------------------------------------------------------- 9. determinism

def _fit(ds, split, cfg, seed):
    torch.manual_seed(seed)
    model = build_siam1((1, 12, 12), (4, 4, 8, 8, 8))
    state = train_similarity(model, ds, split, cfg)
    return model, state


def test_criterion_09_determinism(tmp_path, float64):
    from rpnet.training import deterministic, resume_training
    ds = synthetic_glyphs(num_classes=10, per_class=10, size=12, seed=3)
    split = make_split(ds, 8, 2)
    cfg = TrainConfig(total_updates=50, batch_size=16, eval_interval=10,
                      checkpoint_interval=10, val_pairs=32, seed=4)
    with deterministic():
        a, sa = _fit(ds, split, cfg, 0)
        b, sb = _fit(ds, split, cfg, 0)
        assert sa.losses == sb.losses
        for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
            assert torch.equal(v, w), k

        class Kill(Exception):
            pass

        def die(state):
            if state.step == 30:
                raise Kill

        torch.manual_seed(0)
        c = build_siam1((1, 12, 12), (4, 4, 8, 8, 8))
        with pytest.raises(Kill):
            train_similarity(c, ds, split, cfg, out_dir=tmp_path, callback=die)
        torch.manual_seed(99)
        c = build_siam1((1, 12, 12), (4, 4, 8, 8, 8))
        state = resume_training(tmp_path / "checkpoints" / "latest.npz", c, cfg)
        train_similarity(c, ds, split, cfg, state=state, out_dir=tmp_path)
        for (k, v), w in zip(a.state_dict().items(), c.state_dict().values()):
            assert torch.equal(v, w), k

    ecfg = EvalConfig(5, 1, 20, 5, seed=11)
    r1 = run_protocol(pixel_distance_scorer, ds, split.test + split.validation + (0, 1, 2), ecfg)
    r2 = run_protocol(pixel_distance_scorer, ds, split.test + split.validation + (0, 1, 2), ecfg)
    assert r1.to_json() == r2.to_json()


# ---------------------------------------------------------------- 10. full-scale results

def test_criterion_10_full_scale_results_documented_only():
    omni, mini = load_preset("omniglot-reference"), load_preset("mini-imagenet-reference")
    assert omni.train.total_updates == mini.train.total_updates == 100_000
    pytest.skip("full training runs are multi-hour GPU jobs; presets ship for the long-run "
                "Siam-I 88.4% +/- 3 stretch target")
