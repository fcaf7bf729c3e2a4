"""Acceptance suite: one test per criterion, each printing a PASS line.

Criterion 5/6 train real (desk-scale) models and dominate the runtime; the
other criteria are property suites with explicit runtime budgets.
"""

import math
import time

import numpy as np
import pytest

import oracles
from baseline import baseline_classify
from gradcheck import check_gradients, finite_difference_grads, assert_grads_close
from instances import make_csm_instance, make_rum_instance, squared
from lrlnet import csm as csm_mod
from lrlnet import rum as rum_mod
from lrlnet.abstraction import (
    CsmSetting,
    LayerConfig,
    RumSetting,
    build_model,
    classify,
    collect_loss_terms,
)
from lrlnet.errors import EmptyRegionError
from lrlnet.geometry import (
    ball_query,
    farthest_point_sample,
    k_nearest_centers,
    shell_partition,
)
from lrlnet.harness import RunConfig, train
from lrlnet.loss import cross_entropy, fit_loss, range_loss, rum_loss, total_loss
from lrlnet.seeding import SampleRng, derive_rng
from lrlnet.tensor import ParamBlock, Tape, Tensor, backward, constant, zero_grads

# Number of epochs the trend-check runs train for; accuracy thresholds are
# "reached within 60 epochs", and these runs stay within that budget.
TREND_EPOCHS = 40
RUN_BUDGET_SECONDS = 15 * 60


def _param(name, data):
    return ParamBlock(name, Tensor(np.asarray(data, dtype=np.float64)))


class TestCriterion1Gradients:
    """Reverse-mode vs central finite differences (step 1e-5, rel 1e-4)."""

    def test_gradient_suite(self):
        t0 = time.time()
        from gradcheck import check_gradients_on_instances

        for variant in (1, 2, 3, 4, 5):
            check_gradients_on_instances(
                lambda a, v=variant: make_csm_instance(derive_rng(900, v, a), v,
                                                       k=3, d=4, m=3),
                n_instances=20, rel_tol=1e-4)
        for variant in (1, 2):
            for agg in ("cum", "max"):
                code = 0 if agg == "cum" else 1
                check_gradients_on_instances(
                    lambda a, v=variant, g=agg, c=code: make_rum_instance(
                        derive_rng(901, v, a, c), v, s=5, d=4, t_shells=2, agg=g),
                    n_instances=10, rel_tol=1e-4)
        self._loss_gradients()
        self._end_to_end()
        elapsed = time.time() - t0
        assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s (budget 60s)"
        print(f"\nCRITERION 1 PASS: gradient suite (CSM I-V, RUM I/II, losses, "
              f"end-to-end) in {elapsed:.1f}s")

    @staticmethod
    def _loss_gradients():
        done = 0
        trial = 0
        while done < 20:
            trial += 1
            rng = derive_rng(902, trial)
            pts = rng.uniform(-1, 1, size=(10, 3))
            centers0 = rng.uniform(-1, 1, size=(3, 3))
            shifts0 = rng.uniform(-0.6, 0.6, size=(3, 3))
            deltas0 = rng.uniform(-0.8, 0.8, size=4)
            logits0 = rng.uniform(-1, 1, size=4)
            r = 0.3
            norms = np.sqrt((shifts0 ** 2).sum(axis=1))
            d2 = ((centers0[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
            ds = np.sort(d2, axis=1)
            if (np.any(np.abs(norms - r) < 1e-4)
                    or np.any(np.abs(np.abs(deltas0) - r) < 1e-4)
                    or np.any(np.sqrt(ds[:, 1]) - np.sqrt(ds[:, 0]) < 1e-4)):
                continue  # resample near hinge kinks / nearest-point ties
            done += 1
            centers = _param("centers", centers0)
            shifts = _param("shifts", shifts0)
            deltas = _param("deltas", deltas0)
            logits = _param("logits", logits0)
            check_gradients(lambda: fit_loss(centers.tensor, pts), [centers], rel_tol=1e-4)
            check_gradients(lambda: range_loss(shifts.tensor, r), [shifts], rel_tol=1e-4)
            check_gradients(lambda: rum_loss(deltas.tensor, r), [deltas], rel_tol=1e-4)
            check_gradients(lambda: cross_entropy(logits.tensor, 1), [logits], rel_tol=1e-4)

    @staticmethod
    def _end_to_end():
        from gradcheck import kink_risk
        from instances import randomize_biases

        layers = [
            LayerConfig(n_centers=4, radius=0.35, k=4, mlp_widths=(6,)),
            LayerConfig(n_centers=2, radius=0.7, k=4, mlp_widths=(8,),
                        csm=CsmSetting(variant=1),
                        rum=RumSetting(variant=1, agg="max")),
        ]
        found = None
        for attempt in range(50):
            rng = derive_rng(903, attempt)
            pts = rng.uniform(-1, 1, size=(16, 3))
            pts -= pts.mean(axis=0)
            pts /= np.sqrt((pts ** 2).sum(axis=1)).max()
            model = build_model(layers, (10,), (6,), 3, seed=attempt)
            randomize_biases(model.blocks(), rng)
            srng = SampleRng(1, 1, attempt)
            _, records = classify(pts, model, srng)
            safe = True
            prev = pts
            for rec in records:
                for j in range(rec.groups.shape[0]):
                    d = np.sqrt(((prev - rec.shifted_centers.data[j]) ** 2).sum(axis=1))
                    if np.any(np.abs(d - rec.radii[j]) < 2e-3):
                        safe = False
                if rec.shifts is not None:
                    n = np.sqrt((rec.shifts.data ** 2).sum(axis=1))
                    if np.any(np.abs(n - rec.layer_radius) < 1e-3) or np.any(n < 1e-6):
                        safe = False
                    gaps = ((rec.shifted_centers.data[:, None, :] - prev[None, :, :]) ** 2).sum(axis=2)
                    gs = np.sort(gaps, axis=1)
                    if np.any(np.sqrt(gs[:, 1]) - np.sqrt(gs[:, 0]) < 1e-3):
                        safe = False
                prev = rec.shifted_centers.data

            def build_loss(pts=pts, model=model, srng=srng):
                logits, records = classify(pts, model, srng)
                terms = collect_loss_terms(logits, 1, records, 0.01, 0.01)
                return total_loss(terms)

            if safe and not kink_risk(build_loss):
                found = (build_loss, model)
                break
        assert found is not None, "no kink-free end-to-end instance found"
        build_loss, model = found
        check_gradients(build_loss, model.blocks(), rel_tol=1e-3, abs_tol=1e-6)


class TestCriterion2Oracles:
    def test_oracle_equivalence(self):
        t0 = time.time()
        rng = derive_rng(910)
        for trial in range(200):
            n = int(rng.integers(1, 65))
            pts = rng.uniform(-1, 1, size=(n, 3))

            m = int(rng.integers(1, n + 1))
            seed_idx = int(rng.integers(0, n))
            got = list(farthest_point_sample(pts, m, seed_index=seed_idx))
            assert got == oracles.fps_oracle(pts, m, seed_idx)

            center = rng.uniform(-1, 1, size=3)
            radius = float(rng.uniform(0.2, 1.2))
            k = int(rng.integers(1, 12))
            try:
                bq = list(ball_query(pts, center, radius, k, derive_rng(911, trial)))
            except EmptyRegionError:
                bq = None
            expect = oracles.ball_query_oracle(pts, center, radius, k, derive_rng(911, trial))
            assert bq == expect

            if n >= 2:
                j = int(rng.integers(0, n))
                u = int(rng.integers(1, n))
                assert list(k_nearest_centers(pts, j, u)) == oracles.knn_centers_oracle(pts, j, u)

            t = int(rng.integers(1, 6))
            r2 = float(rng.uniform(0.3, 1.5))
            d = np.sqrt((pts ** 2).sum(axis=1))
            inside = np.flatnonzero(d <= r2)
            if inside.size:
                part = shell_partition(pts, inside, np.zeros(3), r2, t)
                assert list(part.shell_of) == oracles.shell_oracle(pts, inside, np.zeros(3), r2, t)

            centers = rng.uniform(-1, 1, size=(int(rng.integers(1, 8)), 3))
            fl = float(fit_loss(constant(centers), pts).data)
            expect_fl = np.mean([
                math.sqrt(((centers[i] - pts[oracles.nearest_oracle(pts, centers[i])]) ** 2).sum())
                for i in range(centers.shape[0])
            ])
            assert abs(fl - expect_fl) < 1e-12
        elapsed = time.time() - t0
        assert elapsed < 10.0, f"oracle suite took {elapsed:.1f}s (budget 10s)"
        print(f"\nCRITERION 2 PASS: 200 random instances match brute-force oracles "
              f"exactly in {elapsed:.1f}s")


class TestCriterion3Invariants:
    def test_invariant_suite(self):
        rng = derive_rng(920)

        # softmax / attention weights sum to one within 1e-12
        from lrlnet.tensor import softmax
        for _ in range(50):
            x = rng.uniform(-6, 6, size=int(rng.integers(1, 30)))
            assert abs(float(softmax(constant(x)).data.sum()) - 1.0) < 1e-12
        p1 = csm_mod.build_csm_params("a", 1, 4, derive_rng(921))
        p2 = csm_mod.build_csm_params("b", 2, 4, derive_rng(922))
        for trial in range(20):
            irng = derive_rng(923, trial)
            k = int(irng.integers(1, 7))
            center = irng.uniform(-0.4, 0.4, size=3)
            offs = irng.uniform(-1, 1, size=(k, 3))
            offs /= np.maximum(np.sqrt((offs ** 2).sum(axis=1, keepdims=True)), 1e-9)
            pos = center + offs * irng.uniform(0.05, 0.95, size=(k, 1)) * 0.6
            ctx = csm_mod.CsmContext(constant(center), constant(irng.uniform(-1, 1, 4)),
                                     constant(pos), constant(irng.uniform(-1, 1, (k, 4))),
                                     0.3)
            w1 = csm_mod.attention_weights(ctx.center_feature, ctx.neighbor_features, p1)
            w2 = csm_mod.positional_attention_weights(ctx, p2, "sub")
            assert abs(float(w1.data.sum()) - 1.0) < 1e-12
            assert abs(float(w2.data.sum()) - 1.0) < 1e-12

            # tanh-bounded per-axis shift bound
            dc = csm_mod.csm1_shift(ctx, p1).data
            bound = np.abs(center - pos).mean(axis=0)
            assert np.all(np.abs(dc) <= bound + 1e-15)

        # |dr| < r so updated radii stay positive
        for trial in range(20):
            irng = derive_rng(924, trial)
            params, forward = make_rum_instance(irng, 1 + trial % 2, s=6, d=4,
                                                t_shells=2, agg="max" if trial % 2 else "cum")
            delta = float(forward().data)
            assert abs(delta) < 0.3 and 0.3 + delta > 0.0

        # exact permutation invariance: CSM aggregation over neighbors
        for variant in (1, 5):
            irng = derive_rng(925, variant)
            p = csm_mod.build_csm_params("c", variant, 4, irng)
            k = 5
            center = irng.uniform(-0.3, 0.3, size=3)
            offs = irng.uniform(-1, 1, size=(k, 3))
            offs /= np.sqrt((offs ** 2).sum(axis=1, keepdims=True))
            pos = center + offs * irng.uniform(0.05, 0.95, size=(k, 1)) * 0.6
            feats = irng.uniform(-1, 1, size=(k, 4))
            g = irng.uniform(-1, 1, 4)

            def shift(p_, f_):
                ctx = csm_mod.CsmContext(constant(center), constant(g), constant(p_),
                                         constant(f_), 0.3)
                return (csm_mod.csm1_shift(ctx, p) if variant == 1
                        else csm_mod.csm5_shift(ctx, p)).data

            base = shift(pos, feats)
            for _ in range(4):
                perm = irng.permutation(k)
                np.testing.assert_array_equal(shift(pos[perm], feats[perm]), base)

        # exact permutation invariance: RUM shell aggregation
        irng = derive_rng(926)
        rp = rum_mod.build_rum_params("d", 1, 4, 2, irng)
        center = np.zeros(3)
        offs = irng.uniform(-1, 1, size=(8, 3))
        offs /= np.sqrt((offs ** 2).sum(axis=1, keepdims=True))
        pos = center + offs * irng.uniform(0.05, 0.95, size=(8, 1)) * 0.6
        feats = irng.uniform(-1, 1, size=(8, 4))
        g = irng.uniform(-1, 1, 4)

        def shell_rows(p_, f_, agg):
            shells = shell_partition(p_, np.arange(8), center, 0.6, 2)
            ctx = rum_mod.RumContext(center=center, center_feature=constant(g),
                                     neighbor_positions=p_, neighbor_features=constant(f_),
                                     shells=shells, layer_radius=0.3)
            return rum_mod.shell_features(ctx, rp, agg).data

        for agg in ("cum", "max"):
            base = shell_rows(pos, feats, agg)
            for _ in range(4):
                perm = irng.permutation(8)
                np.testing.assert_array_equal(shell_rows(pos[perm], feats[perm], agg), base)

        # exact max-pool invariance + toggle-off bitwise baseline equality
        layers = [
            LayerConfig(n_centers=16, radius=0.22, k=8, mlp_widths=(16,)),
            LayerConfig(n_centers=4, radius=0.45, k=8, mlp_widths=(24,)),
        ]
        model = build_model(layers, (32,), (16,), 3, seed=31)
        weights = {pb.name: pb.tensor.data for pb in model.blocks()}
        irng = derive_rng(927)
        for trial in range(3):
            pts = irng.uniform(-1, 1, size=(128, 3))
            pts -= pts.mean(axis=0)
            pts /= np.sqrt((pts ** 2).sum(axis=1)).max()
            logits, _ = classify(pts, model, SampleRng(7, 1, trial))
            ref = baseline_classify(pts, weights, layers, 1, 2, 7, 1, trial)
            np.testing.assert_array_equal(logits.data, ref)
        print("\nCRITERION 3 PASS: invariant suite (weight sums, bounds, exact "
              "permutation invariance, bitwise toggle-off equivalence)")


class TestCriterion4HingeArithmetic:
    def test_hinge_values(self):
        shifts = constant([[0.1, 0.0, 0.0], [0.5, 0.0, 0.0], [0.7, 0.0, 0.0]])
        got = float(range_loss(shifts, 0.4).data)
        assert abs(got - (0.0 + 0.1 + 0.3) / 3.0) < 1e-12

        single = constant([[0.5, 0.0, 0.0]])
        assert abs(float(range_loss(single, 0.2).data) - 0.3) < 1e-12

        r = 0.4
        assert float(rum_loss(constant([0.0, 0.39, -0.4]), r).data) == 0.0
        assert abs(float(rum_loss(constant([-1.5 * r]), r).data) - 0.5 * r) < 1e-12
        assert abs(float(rum_loss(constant([1.5 * r]), r).data) - 0.5 * r) < 1e-12

        ce = float(cross_entropy(constant([0.0, 0.0, 0.0, 0.0]), 2).data)
        assert abs(ce - math.log(4.0)) < 1e-12
        print("\nCRITERION 4 PASS: hinge-loss and cross-entropy arithmetic exact "
              "within 1e-12")


def _trend_config(csm, rum, clutter):
    run = RunConfig(seed=0, epochs=TREND_EPOCHS)
    run.synth_clutter = clutter
    run.layers[1].csm = csm
    run.layers[1].rum = rum
    return run


def _best_acc(history):
    return max(row["test_acc"] for row in history)


@pytest.fixture(scope="module")
def trend_runs(tmp_path_factory):
    """Train the criterion-5 configurations once; reused by criteria 5 and 6."""
    root = tmp_path_factory.mktemp("trend")
    specs = {
        "baseline": _trend_config(None, None, False),
        "csm1_2nd": _trend_config(CsmSetting(variant=1), None, False),
        "rum1max_2nd": _trend_config(None, RumSetting(variant=1, agg="max"), False),
        "combined_2nd": _trend_config(CsmSetting(variant=1),
                                      RumSetting(variant=1, agg="max"), False),
        "baseline_clutter": _trend_config(None, None, True),
        "combined_clutter": _trend_config(CsmSetting(variant=1),
                                          RumSetting(variant=1, agg="max"), True),
    }
    results = {}
    for name, cfg in specs.items():
        t0 = time.time()
        results[name] = train(cfg, root / name)
        elapsed = time.time() - t0
        assert elapsed < RUN_BUDGET_SECONDS, (
            f"{name}: training took {elapsed:.0f}s (budget {RUN_BUDGET_SECONDS}s)"
        )
        print(f"  [trend] {name}: best test_acc "
              f"{_best_acc(results[name].history):.4f} in {elapsed:.0f}s")
    return root, specs, results


class TestCriterion5Trend:
    def test_desk_scale_trend(self, trend_runs):
        _, _, results = trend_runs
        a0 = _best_acc(results["baseline"].history)
        assert a0 >= 0.90, f"baseline reached only {a0:.4f} (< 0.90)"
        for name in ("csm1_2nd", "rum1max_2nd", "combined_2nd"):
            acc = _best_acc(results[name].history)
            assert acc >= a0 - 0.02, f"{name} reached {acc:.4f} < A0 - 0.02 = {a0 - 0.02:.4f}"
        clutter_base = _best_acc(results["baseline_clutter"].history)
        clutter_comb = _best_acc(results["combined_clutter"].history)
        assert clutter_comb >= clutter_base, (
            f"combined on clutter {clutter_comb:.4f} < baseline on clutter {clutter_base:.4f}"
        )
        print(f"\nCRITERION 5 PASS: baseline A0={a0:.4f}; "
              f"csm1={_best_acc(results['csm1_2nd'].history):.4f}, "
              f"rum1max={_best_acc(results['rum1max_2nd'].history):.4f}, "
              f"combined={_best_acc(results['combined_2nd'].history):.4f} "
              f"(all >= A0-0.02); clutter: combined {clutter_comb:.4f} >= "
              f"baseline {clutter_base:.4f}")


class TestCriterion6Determinism:
    def test_baseline_rerun_byte_identical(self, trend_runs, tmp_path):
        root, specs, results = trend_runs
        rerun = train(specs["baseline"], tmp_path / "baseline_again")
        original = results["baseline"].metrics_path.read_bytes()
        repeated = rerun.metrics_path.read_bytes()
        assert original == repeated, "metrics CSV differs between identical runs"
        print(f"\nCRITERION 6 PASS: baseline rerun metrics byte-identical "
              f"({len(original)} bytes)")
