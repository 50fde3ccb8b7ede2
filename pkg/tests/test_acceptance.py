"""Shipping gate: one check per guarantee the package makes.

Each test here is a single pass/fail verdict with its tolerance pinned as a
module constant. Component-level detail lives in the per-module test files;
this file only answers "does the delivered behavior hold end to end".
"""

import time

import numpy as np
import pytest

from infomask import cli, datagen, metrics
from infomask import model as net
from infomask import objective as O
from infomask import tensor as T
from infomask import training
from infomask.tensor import Tensor, grad_check

# Pinned tolerances and targets.
GRAD_REL_TOL = 1e-4          # worst finite-difference relative error
GRAD_SUITE_BUDGET_S = 120.0  # whole gradient check must stay under this
KINK_SLOPE_GAP = 5e-5        # one-sided slope disagreement marking a kink
KL_MC_REL_TOL = 0.01         # closed form vs 1e6-sample Monte-Carlo
KL_HAND_TOL = 1e-12          # hand-computed KL values
AUC_TOL = 1e-12              # rank AUC vs pair enumeration
E2E_ACCURACY_TARGET = 0.95   # test-set accuracy on the default task
E2E_MEDIAN_IOP_TARGET = 0.5  # median inside-box fraction at tuned threshold
E2E_BUDGET_S = 1800.0        # full synthetic run, single commodity core


def _swap(params, name, t):
    return net.ModelParams({**dict(params.items()), name: t})


def _one_sided_slopes(fn, point, coord, h=1e-5):
    base = np.array(point.data, dtype=np.float64)
    flat = base.reshape(-1)
    orig = flat[coord]
    with T.no_grad():
        flat[coord] = orig + h
        f_plus = float(fn(Tensor(base)).data)
        flat[coord] = orig - h
        f_minus = float(fn(Tensor(base)).data)
        flat[coord] = orig
        f_mid = float(fn(Tensor(base)).data)
    return (f_plus - f_mid) / h, (f_mid - f_minus) / h


class TestGradientCorrectness:
    def test_primitives_and_full_pass_match_finite_differences(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(7)
        worst = 0.0

        # Every differentiable primitive, probed at random points placed
        # away from relu/clamp/maxpool kinks by construction or seed.
        w = Tensor(rng.normal(0, 0.4, (5, 3, 3, 3)))
        b = Tensor(rng.normal(0, 0.1, (5,)))
        wk = Tensor(rng.normal(0, 0.3, (4, 2)))
        bk = Tensor(rng.normal(0, 0.1, 2))
        conv_x = Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)))
        labels3 = np.array([0, 2, 1])
        cases = [
            (lambda t: T.mean_all(T.conv2d(t, w, b, padding=1)), rng.uniform(-1, 1, (2, 3, 6, 6))),
            (
                lambda t: T.mean_all(T.conv2d(t, w, b, stride=2, padding=1)),
                rng.uniform(-1, 1, (2, 3, 7, 6)),
            ),
            (
                lambda t: T.mean_all(T.relu(T.conv2d(conv_x, t, b, padding=1))),
                rng.normal(0, 0.4, (5, 3, 3, 3)),
            ),
            (
                lambda t: T.sum_all(T.mul(T.maxpool2(t), T.maxpool2(t))),
                rng.uniform(-1, 1, (2, 2, 5, 7)),
            ),
            (
                lambda t: T.sum_all(T.mul(T.upsample_nearest(t, 4), T.upsample_nearest(t, 4))),
                rng.uniform(-1, 1, (1, 2, 3, 3)),
            ),
            (
                lambda t: T.sum_all(T.mul(T.global_avg_pool(t), T.global_avg_pool(t))),
                rng.uniform(-1, 1, (2, 3, 4, 4)),
            ),
            (lambda t: T.mean_all(T.affine(t, wk, bk)), rng.normal(0, 1, (3, 4))),
            (
                lambda t: T.mul_scalar(
                    T.sum_all(T.log(T.pick_class(T.softmax(t), labels3))), -1.0
                ),
                rng.normal(0, 1, (3, 4)),
            ),
            (lambda t: T.mean_all(T.relu(t)), rng.normal(0, 2, (4, 4)) + np.sign(rng.normal(size=(4, 4))) * 0.02),
            (lambda t: T.mean_all(T.sigmoid(t)), rng.normal(0, 2, (4, 4))),
            (lambda t: T.mean_all(T.softplus(t)), rng.normal(0, 2, (4, 4))),
            (lambda t: T.sum_all(T.log(T.clamp(t, 1e-12, None))), rng.uniform(0.2, 1.0, (3, 3))),
            (
                lambda t: T.sum_all(T.clamp(T.add_scalar(T.sigmoid(t), -0.5), 0.0, 1.0)),
                rng.normal(0, 2, (4, 4)) + 0.05,
            ),
            (lambda t: T.sum_all(T.mul(t, t)), rng.normal(0, 1, (3, 3))),
            (lambda t: T.sum_all(t + Tensor(np.ones((2, 2)))), rng.normal(0, 1, (2, 2))),
            (lambda t: T.sum_all(t - Tensor(np.ones((2, 2)))), rng.normal(0, 1, (2, 2))),
            (lambda t: T.sum_all(T.neg(t)), rng.normal(0, 1, (2, 2))),
            (lambda t: T.mean_all(T.mul_scalar(T.add_scalar(t, 0.3), 1.7)), rng.normal(0, 1, (2, 3))),
        ]
        for fn, point in cases:
            worst = max(worst, grad_check(fn, Tensor(point)))

        # Full forward plus objective at 16x16, float64, probing a sample of
        # coordinates in every parameter tensor.
        samples = datagen.generate(
            4, datagen.SynthConfig(image_size=16, blob_radius=(3, 5), seed=5)
        )
        params = net.ModelParams.initialize(np.random.default_rng(2), np.float64)
        eps = np.random.default_rng(3).standard_normal((2, 4, 1, 16, 16))
        cfg = O.LossConfig(alpha=1e-3, eps_samples=2)

        # A coordinate whose difference interval straddles a relu, clamp, or
        # maxpool kink is detectable: its forward and backward one-sided
        # slopes disagree. A wrong gradient instead has agreeing one-sided
        # slopes that both contradict the analytic value. Kink coordinates
        # are excluded, and must stay a small minority.
        probed = skipped = 0
        for name, leaf in params.items():
            def loss_of(t, _n=name):
                return O.batch_loss(samples, _swap(params, _n, t), cfg, eps=eps).node

            size = leaf.data.size
            coords = np.random.default_rng(size).choice(size, size=min(4, size), replace=False)
            for c in map(int, coords):
                probed += 1
                err = grad_check(loss_of, leaf, coords=[c])
                if err >= GRAD_REL_TOL:
                    fwd, bwd = _one_sided_slopes(loss_of, leaf, c)
                    if abs(fwd - bwd) > KINK_SLOPE_GAP * max(1.0, abs(fwd), abs(bwd)):
                        skipped += 1
                        continue
                    err = grad_check(loss_of, leaf, step=1e-6, coords=[c])
                assert err < GRAD_REL_TOL, f"{name}[{c}] relative error {err:.3e}"
                worst = max(worst, err)
        assert skipped <= probed // 10, f"{skipped} of {probed} coordinates near kinks"

        elapsed = time.monotonic() - t0
        assert worst < GRAD_REL_TOL, f"worst relative error {worst:.3e}"
        assert elapsed < GRAD_SUITE_BUDGET_S, f"gradient suite took {elapsed:.1f}s"


class TestKlOracle:
    def test_closed_form_matches_monte_carlo_and_hand_values(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            mu = float(rng.uniform(-3, 3))
            sigma = float(rng.uniform(0.2, 3.0))
            closed = float(
                O.kl_to_standard_normal(
                    Tensor(np.full((1, 1, 1, 1), mu)), Tensor(np.full((1, 1, 1, 1), sigma))
                ).data
            )
            z = mu + sigma * rng.standard_normal(1_000_000)
            mc = float(np.mean(-np.log(sigma) - (z - mu) ** 2 / (2 * sigma**2) + z**2 / 2))
            assert closed == pytest.approx(mc, rel=KL_MC_REL_TOL), (mu, sigma)

        standard = float(
            O.kl_to_standard_normal(
                Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1)))
            ).data
        )
        shifted = float(
            O.kl_to_standard_normal(
                Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1)))
            ).data
        )
        assert abs(standard - 0.0) <= KL_HAND_TOL
        assert abs(shifted - 0.5) <= KL_HAND_TOL


def _scores_brute(pred, box):
    h, w = pred.shape
    x0, y0, x1, y1 = box
    inter = fp = box_area = 0
    for r in range(h):
        for c in range(w):
            inside = y0 <= r <= y1 and x0 <= c <= x1
            box_area += inside
            if pred[r, c] and inside:
                inter += 1
            elif pred[r, c]:
                fp += 1
    total = int(pred.sum())
    iop = None if total == 0 else inter / total
    outside = h * w - box_area
    fpr = fp / outside if outside else None
    fnr = (box_area - inter) / box_area
    return iop, fpr, fnr


def _auc_brute(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else (0.5 if p == n else 0.0)
    return wins / (len(pos) * len(neg))


class TestMetricOracle:
    def test_localization_and_auc_match_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            pred = rng.random((h, w)) < rng.uniform(0.0, 1.0)
            x0 = int(rng.integers(0, w))
            x1 = int(rng.integers(x0, w))
            y0 = int(rng.integers(0, h))
            y1 = int(rng.integers(y0, h))
            box = (x0, y0, x1, y1)
            got = metrics.score_mask(pred, box)
            want_iop, want_fpr, want_fnr = _scores_brute(pred, box)
            assert got.iop == want_iop
            assert got.fpr == want_fpr
            assert got.fnr == want_fnr

        for _ in range(100):
            n = int(rng.integers(4, 40))
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            scores = np.round(rng.random(n), 2)
            got = metrics.auc(scores, labels)
            assert got == pytest.approx(_auc_brute(scores, labels), abs=AUC_TOL)


class TestMaskSemantics:
    def test_range_zero_set_monotonicity_and_clamp(self):
        rng = np.random.default_rng(13)
        z = Tensor(rng.normal(0, 2, (3, 1, 8, 8)))
        for tau in (0.0, 0.25, 0.5, 0.9):
            m = net.apply_mask(z, tau).data
            squashed = 1 / (1 + np.exp(-z.data))
            assert ((m >= 0) & (m <= 1)).all()
            assert ((m == 0) == (squashed <= tau)).all()

        # Monotone in the squashed latent at fixed tau.
        zs = np.linspace(-6, 6, 101)
        ms = net.apply_mask(Tensor(zs.reshape(1, 1, 1, -1)), 0.5).data.ravel()
        assert (np.diff(ms) >= 0).all()

        # Antitone in tau at a fixed latent.
        taus = np.linspace(0.0, 1.0, 21)
        at_fixed = [
            net.apply_mask(Tensor(np.full((1, 1, 1, 1), 0.7)), t).data.item() for t in taus
        ]
        assert (np.diff(at_fixed) <= 0).all()

        # The clamp itself: values past either end saturate exactly.
        clamped = T.clamp(Tensor(np.array([1.5, -0.3])), 0.0, 1.0).data
        assert clamped[0] == 1.0
        assert clamped[1] == 0.0


# Settings for the full-scale synthetic run; pinned by the calibration run
# recorded in the repo (see README).
E2E_DATA = dict(image_size=64, seed=0)
E2E_N_SAMPLES = 3000
E2E_FRACTIONS = (2 / 3, 1 / 6, 1 / 6)
E2E_TRAIN = dict(
    learning_rate=3e-4,
    optimizer="adaptive-moments",
    batch_size=16,
    epochs=7,
    seed=0,
    classifier_input="masked_input",
    eval_draws=2,
)
E2E_ALPHA = 2.5e-5
E2E_EPS_SAMPLES = 1
E2E_EVAL_DRAWS = 4


@pytest.mark.slow
class TestSyntheticEndToEnd:
    def test_default_task_hits_accuracy_and_iop_targets(self):
        t0 = time.monotonic()
        samples = datagen.generate(E2E_N_SAMPLES, datagen.SynthConfig(**E2E_DATA))
        train_s, val_s, test_s = datagen.split(samples, E2E_FRACTIONS, seed=E2E_DATA["seed"])
        assert (len(train_s), len(val_s), len(test_s)) == (2000, 500, 500)

        cfg = training.TrainConfig(
            loss=O.LossConfig(alpha=E2E_ALPHA, eps_samples=E2E_EPS_SAMPLES),
            **E2E_TRAIN,
        )
        result = training.train(train_s, val_s, cfg)
        best = training.select_checkpoint(result.checkpoints, cfg.n_checkpoints)
        report = training.evaluate(
            best.params,
            test_s,
            best.threshold,
            tau=cfg.tau,
            classifier_input=cfg.classifier_input,
            eval_draws=E2E_EVAL_DRAWS,
        )
        elapsed = time.monotonic() - t0

        iops = [s.iop for s in report.scores if s.iop is not None]
        median_iop = float(np.median(iops)) if iops else float("nan")
        assert report.accuracy >= E2E_ACCURACY_TARGET, f"accuracy {report.accuracy:.4f}"
        assert median_iop >= E2E_MEDIAN_IOP_TARGET, f"median IoP {median_iop:.4f}"
        assert elapsed <= E2E_BUDGET_S, f"end-to-end run took {elapsed:.0f}s"


# Reduced-scale setup for the three-way objective comparison; one surviving
# direction claim, three seeds.
ABLATION_DATA = dict(image_size=32, blob_radius=(3, 6))
ABLATION_N = 600
ABLATION_SEEDS = (0, 1, 2)
ABLATION_ALPHA = 1e-4
ABLATION_L1 = 1.0
ABLATION_TRAIN = dict(
    learning_rate=3e-4,
    optimizer="adaptive-moments",
    batch_size=16,
    epochs=20,
    classifier_input="masked_input",
    eval_draws=2,
)


@pytest.mark.slow
class TestAblationOrdering:
    def test_variant_ranking_and_mask_area_direction(self):
        from infomask import baselines

        med_iops = {"infomask": [], "featuremask": [], "regl1": []}
        areas = {"infomask": [], "regl1": []}
        for seed in ABLATION_SEEDS:
            samples = datagen.generate(
                ABLATION_N, datagen.SynthConfig(seed=seed, **ABLATION_DATA)
            )
            train_s, val_s, test_s = datagen.split(samples, (2 / 3, 1 / 6, 1 / 6), seed=seed)
            cfg = training.TrainConfig(seed=seed, **ABLATION_TRAIN)
            for name in med_iops:
                spec = baselines.method_spec(
                    name,
                    alpha=ABLATION_ALPHA,
                    l1_weight=ABLATION_L1,
                    classifier_input=ABLATION_TRAIN["classifier_input"],
                )
                fitted = baselines.fit_method(spec, train_s, val_s, cfg)
                maps = baselines.localization_maps(fitted, test_s)
                boxed = [
                    (m, s.bbox) for m, s in zip(maps, test_s) if s.bbox is not None
                ]
                iops = [
                    v
                    for m, b in boxed
                    if (v := metrics.iop(metrics.binarize(m, fitted.threshold), b)) is not None
                ]
                med_iops[name].append(float(np.median(iops)) if iops else 0.0)
                if name in areas:
                    areas[name].append(
                        float(
                            np.mean([metrics.binarize(m, fitted.threshold).mean() for m in maps])
                        )
                    )

        info = float(np.median(med_iops["infomask"]))
        feat = float(np.median(med_iops["featuremask"]))
        reg = float(np.median(med_iops["regl1"]))
        assert info > feat, f"median IoP {info:.3f} vs featuremask {feat:.3f}"
        assert info > reg, f"median IoP {info:.3f} vs regl1 {reg:.3f}"
        assert np.mean(areas["regl1"]) < np.mean(areas["infomask"]), (
            f"mean mask area regl1 {np.mean(areas['regl1']):.4f} "
            f"vs infomask {np.mean(areas['infomask']):.4f}"
        )


class TestAlphaZeroIdentity:
    def test_latent_masking_variant_matches_alpha_zero_bitwise(self):
        samples = datagen.generate(
            32, datagen.SynthConfig(image_size=16, blob_radius=(3, 5), seed=9)
        )
        ss = np.random.SeedSequence(17).spawn(3)
        cfgs = [O.LossConfig(variant="featuremask"), O.LossConfig(alpha=0.0)]
        runs = []
        for cfg in cfgs:
            params = net.ModelParams.initialize(np.random.default_rng(ss[0]), np.float64)
            opt = training.make_optimizer(
                "adaptive-moments", params, training.TrainConfig(learning_rate=1e-3)
            )
            runs.append((params, opt, cfg))

        eps_rng = np.random.default_rng(ss[1])
        order_rng = np.random.default_rng(ss[2])
        for _ in range(10):
            idx = order_rng.choice(len(samples), size=8, replace=False)
            batch = [samples[i] for i in idx]
            eps = eps_rng.standard_normal((1, 8, 1, 16, 16))
            for params, opt, cfg in runs:
                training.step(params, batch, opt, cfg, eps=eps, tau=0.5)
            a, b = runs[0][0], runs[1][0]
            for name, t in a.items():
                assert t.data.tobytes() == b[name].data.tobytes(), name
                assert t.data.dtype == np.float64


class TestSelectionFixtures:
    def test_checkpoint_and_threshold_hand_traces(self):
        def ckpt(epoch, acc, iop):
            return training.Checkpoint(epoch, None, acc, iop, 0.5)

        # Pool of two best accuracies (epochs 2 and 3); higher IoP wins.
        picked = training.select_checkpoint(
            [ckpt(1, 0.7, 0.9), ckpt(2, 0.9, 0.2), ckpt(3, 0.8, 0.6)], pool_size=2
        )
        assert picked.epoch == 3

        # Accuracy tie at the pool boundary goes to the earlier epoch; nan
        # IoP ranks below any number.
        picked = training.select_checkpoint(
            [ckpt(1, 0.9, float("nan")), ckpt(2, 0.9, 0.1), ckpt(3, 0.9, 0.4)], pool_size=2
        )
        assert picked.epoch == 2

        # Threshold grid walk: background at 0.12 leaks into the mask below
        # 0.15, box interiors sit at 0.32, so IoP hits 1.0 first at 0.15 and
        # the smallest winning threshold is kept.
        maps = np.full((2, 8, 8), 0.12)
        boxes = [(1, 1, 4, 4), (2, 2, 5, 5)]
        for m, (x0, y0, x1, y1) in zip(maps, boxes):
            m[y0 : y1 + 1, x0 : x1 + 1] = 0.32
        threshold, mean_iop = training.tune_threshold(maps, boxes, fnr_cap=0.95, step=0.05)
        assert threshold == 0.15
        assert mean_iop == 1.0

        # A single hit inside a 25-pixel box misses the miss-rate cap at
        # every threshold (FNR 0.96); the cap is dropped with a warning and
        # the unconstrained best returned.
        lone = np.zeros((1, 8, 8))
        lone[0, 3, 3] = 0.9
        threshold, mean_iop = training.tune_threshold(
            lone, [(1, 1, 5, 5)], fnr_cap=0.95, step=0.05
        )
        assert threshold == 0.0
        assert mean_iop == 1.0

        # Every threshold empties every mask.
        with pytest.raises(training.EmptyMaskError):
            training.tune_threshold(np.zeros((2, 8, 8)), boxes, fnr_cap=0.95, step=0.05)


DET_DATA = [
    "image_size=16",
    "n_samples=40",
    "blob_radius_low=3",
    "blob_radius_high=5",
    "split_train=0.5",
    "split_val=0.25",
    "split_test=0.25",
]
DET_TRAIN = ["epochs=2", "batch_size=4", "seed=3", "n_checkpoints=2"]


class TestDeterminism:
    def test_repeated_runs_are_byte_identical(self, tmp_path):
        def run_chain(root):
            data = root / "data"
            run = root / "run"
            ev = root / "eval"
            assert cli.main(["gen-data", "--out", str(data), *DET_DATA]) == 0
            assert cli.main(["train", "--data", str(data), "--out", str(run), *DET_TRAIN]) == 0
            assert cli.main(
                ["eval", "--run", str(run), "--data", str(data), "--split", "test",
                 "--out", str(ev)]
            ) == 0
            return root

        a = run_chain(tmp_path / "a")
        b = run_chain(tmp_path / "b")
        rel_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        rel_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert rel_a == rel_b
        assert rel_a, "no artifacts produced"
        for rel in rel_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), str(rel)
