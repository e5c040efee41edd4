"""Acceptance gate: every shipped guarantee, checked end to end.

One test per guarantee, each printing a single `[acceptance] <name>: PASS`
or `: FAIL` line (visible with `pytest -s` or `-rA`; the pytest verdict
carries the same information). The end-to-end comparisons share one
session fixture that runs the full pipeline for five seeds in each threat
model, so expect the module to take roughly half an hour on one core.
Deselect it during development with `pytest -m "not acceptance"`.
"""

import contextlib
import json
import time

import numpy as np
import pytest

import oracles
from test_autodiff import op_cases, run_fd_check, scalarize
from spoofbench import attacks, evalmetrics, harness, models
from spoofbench.autodiff import OP_NAMES, Tensor, load_tensors, ops

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
EPSILONS = (0.1, 1.0, 2.0, 5.0)
GRID = tuple(f"{m}_eps{e:g}" for m in ("fgsm", "pgd") for e in EPSILONS)


@contextlib.contextmanager
def _verdict(name):
    try:
        yield
    except BaseException:
        print(f"[acceptance] {name}: FAIL", flush=True)
        raise
    print(f"[acceptance] {name}: PASS", flush=True)


# ---------------------------------------------------------------------------
# shared end-to-end runs


def _write_cfg(base, name, seed, mode, root):
    path = base / name
    path.write_text(f"""\
[corpus]
n_speakers = 10
seed = {seed}
duration_min = 0.45
duration_max = 0.55
bonafide_train = 6
bonafide_dev = 3
bonafide_eval = 6
spoof_train = 6
spoof_dev = 3
spoof_eval = 6
n_enroll = 2

[models]
epochs = 10
patience = 3
lr = 1e-3

[attack]
mode = {mode}
transform_epochs = 12

[output]
root = {root}
""")
    return path


@pytest.fixture(scope="session")
def pipelines(tmp_path_factory):
    """Five white-box and five black-box full runs at the acceptance scale.

    The white-box wall time is the sum over the five runs, measured here so
    the bound covers exactly the experiment (corpus through report).
    """
    base = tmp_path_factory.mktemp("acceptance")
    out = {"wb": [], "bb": [], "wb_wall": 0.0}
    for seed in SEEDS:
        root = base / f"wb{seed}"
        cfg = _write_cfg(base, f"wb{seed}.ini", seed, "whitebox", root)
        start = time.monotonic()
        assert harness.main(["all", "--config", str(cfg)]) == 0
        out["wb_wall"] += time.monotonic() - start
        out["wb"].append(root)
    for seed in SEEDS:
        root = base / f"bb{seed}"
        cfg = _write_cfg(base, f"bb{seed}.ini", seed, "blackbox", root)
        assert harness.main(["all", "--config", str(cfg)]) == 0
        out["bb"].append(root)
    return out


def _report_rows(root):
    report = json.loads((root / "report" / "report.json").read_text())
    return {row["attack"]: row for row in report["rows"]}


def _attack_summary(root):
    return json.loads((root / "state" / "attack.json").read_text())


# ---------------------------------------------------------------------------
# gradient integrity


def _composite_cases(seed):
    """The four trained-model graphs, sized down, plus per-case losses."""
    rng = np.random.default_rng(10_000 + seed)
    cases = []
    lcnn = models.PadModel("lcnn-like", n_bins=16, seed=seed)
    cases.append(("pad-lcnn", lcnn, rng.standard_normal((16, 16)),
                  lambda m, t: ops.cross_entropy(m.logits(t), 1)))
    senet = models.PadModel("senet-like", n_bins=16, seed=seed)
    cases.append(("pad-senet", senet, rng.standard_normal((16, 16)),
                  lambda m, t: ops.cross_entropy(m.logits(t), 0)))
    emb = models.AsvEmbedder(n_bins=8, hidden=6, seed=seed)
    w_e = rng.standard_normal(models.EMBED_DIM)
    cases.append(("embedder", emb, rng.standard_normal((16, 8)),
                  lambda m, t, w=w_e: scalarize(m.embed(t), w)))
    net = attacks.TransformNet(seed=seed)
    # the last layer initializes at zero; nudge it so gradients flow to
    # every layer instead of vanishing through a zero kernel
    for p in net.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
    w_t = rng.standard_normal(120)
    cases.append(("transform", net, rng.standard_normal((10, 12)),
                  lambda m, t, w=w_t: scalarize(m.delta_node(t), w)))
    return cases, rng


def test_gradient_integrity():
    start = time.monotonic()
    with _verdict("gradient integrity"):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            cases = op_cases(rng)
            for name in OP_NAMES:
                make_arrays, build = cases[name]
                worst = max(worst, run_fd_check(name, make_arrays, build,
                                                rng, n_coords=2, tol=1e-5))

        for seed in range(100):
            cases, rng = _composite_cases(seed)
            for name, model, x_arr, loss in cases:
                xt = Tensor(x_arr, requires_grad=True)
                params = model.parameters()

                def run(model=model, xt=xt, params=params, loss=loss):
                    xt.grad = None
                    for p in params:
                        p.grad = None
                    return loss(model, xt)

                probes = [xt] + list(rng.choice(params, size=2,
                                                replace=False))
                for tens in probes:
                    run().backward()
                    grad = tens.grad.reshape(-1)
                    idx = rng.choice(tens.data.size,
                                     size=min(2, tens.data.size),
                                     replace=False)

                    def f(flat, tens=tens, run=run):
                        saved = tens.data.copy()
                        tens.data = flat.reshape(tens.data.shape)
                        try:
                            return run().item()
                        finally:
                            tens.data = saved

                    fd = oracles.central_difference(
                        f, tens.data.reshape(-1).copy(), idx, h=1e-6)
                    for j, i in enumerate(idx):
                        err = oracles.relative_error(grad[i], fd[j])
                        assert err < 1e-5, \
                            f"{name} seed {seed} coord {i}: {err:.3e}"
                        worst = max(worst, err)

        elapsed = time.monotonic() - start
        assert worst < 1e-5, f"max relative error {worst:.3e}"
        assert elapsed < 60.0, f"gradient sweep took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# metric-oracle equivalence


def _metric_fixture(i):
    """Scores for one random fixture, <= 1000 trials, ties included."""
    rng = np.random.default_rng(4000 + i)
    n_pos = int(rng.integers(2, 400))
    n_neg = int(rng.integers(2, 400))
    if i % 3 == 0:
        pos = np.round(rng.normal(0.7, 1.0, n_pos), 1)
        neg = np.round(rng.normal(-0.7, 1.0, n_neg), 1)
    else:
        pos = rng.normal(1.0, 1.0, n_pos)
        neg = rng.normal(-1.0, 1.0, n_neg)
    return pos, neg, rng


def test_metric_oracle_equivalence():
    start = time.monotonic()
    with _verdict("metric-oracle equivalence"):
        cfg = evalmetrics.TdcfConfig()
        cost = {"p_target": cfg.p_target, "p_nontarget": cfg.p_nontarget,
                "p_spoof": cfg.p_spoof, "c_miss_asv": cfg.c_miss_asv,
                "c_fa_asv": cfg.c_fa_asv, "c_miss_cm": cfg.c_miss_cm,
                "c_fa_cm": cfg.c_fa_cm}
        for i in range(100):
            pos, neg, rng = _metric_fixture(i)

            eer, thr = evalmetrics.compute_eer(pos, neg)
            want_eer, want_thr = oracles.eer_reference(list(pos), list(neg))
            assert eer == want_eer and thr == want_thr, f"fixture {i}"

            # joint EER: sentinels map below every finite score on both
            # routes; the oracle route does its own mapping
            trial_scores = []
            finite = []
            for j, s in enumerate(pos):
                gated = rng.random() < 0.2
                trial_scores.append(evalmetrics.TrialScore(
                    f"p{j}", "target", 1.0, float(s),
                    None if gated else float(s)))
                if not gated:
                    finite.append(float(s))
            for j, s in enumerate(neg):
                kind = "spoof" if j % 2 else "nontarget"
                gated = rng.random() < 0.3
                trial_scores.append(evalmetrics.TrialScore(
                    f"n{j}", kind, 1.0, float(s),
                    None if gated else float(s)))
                if not gated:
                    finite.append(float(s))
            floor = (min(finite) - 1.0) if finite else 0.0
            o_pos = [floor if t.joint_score is None else t.joint_score
                     for t in trial_scores if t.trial_type == "target"]
            o_neg = [floor if t.joint_score is None else t.joint_score
                     for t in trial_scores if t.trial_type != "target"]
            got_joint = evalmetrics.joint_eer(trial_scores)
            want_joint, _ = oracles.eer_reference(o_pos, o_neg)
            assert got_joint == want_joint, f"fixture {i}"

            tar = rng.normal(1.5, 0.5, max(3, n_pos // 2))
            non = rng.normal(-0.5, 0.5, max(3, n_neg // 2))
            spoof_asv = rng.normal(0.8, 0.7, max(3, n_neg // 2))
            got_t = evalmetrics.min_tdcf(pos, neg, tar, non, spoof_asv, cfg)
            want_t = oracles.tdcf_reference(list(pos), list(neg), list(tar),
                                            list(non), list(spoof_asv), cost)
            assert abs(got_t - want_t) < 1e-10, f"fixture {i}"

        elapsed = time.monotonic() - start
        assert elapsed < 60.0, f"metric sweep took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# reranking contract


def test_rerank_is_valid_distribution_with_bonafide_argmax():
    with _verdict("rerank distribution contract"):
        rng = np.random.default_rng(77)
        for i in range(10_000):
            size = int(rng.integers(2, 11))
            scores = rng.uniform(0.0, 1.0, size)
            scores[int(rng.integers(0, size))] = 0.0
            if scores.max() <= 0.0:
                scores[-1] = rng.uniform(0.1, 1.0)
            out = attacks.rerank(scores, alpha=10.0)
            assert np.all(out >= 0.0)
            assert abs(out.sum() - 1.0) < 1e-12
            assert int(np.argmax(out)) == 0
            assert out[0] > max(out[1:])


# ---------------------------------------------------------------------------
# attack budget soundness


def test_attack_budget_and_single_step_equivalence(pipelines):
    with _verdict("attack budget soundness"):
        for root in pipelines["wb"] + pipelines["bb"]:
            feats = load_tensors(root / "features" / "logpower.ckpt")
            for name in GRID:
                adv, meta = attacks.load_attack_set(
                    root / "attacks" / f"{name}.adv")
                eps = meta["eps"]
                assert adv, name
                for uid, x_adv in adv.items():
                    linf = float(np.max(np.abs(x_adv - feats[uid])))
                    assert linf <= eps + 1e-9, \
                        f"{root.name}/{name}/{uid}: {linf} > {eps}"

        # single-step equivalence, checked on a trained victim
        root = pipelines["wb"][0]
        pad = models.load_model(root / "models" / "pad.ckpt")
        feats = load_tensors(root / "features" / "logpower.ckpt")
        adv, _ = attacks.load_attack_set(root / "attacks" / "fgsm_eps1.adv")
        for uid in sorted(adv)[:3]:
            for eps in EPSILONS:
                one = attacks.fgsm(pad, feats[uid], eps)
                via_pgd = attacks.pgd(pad, feats[uid], eps, n_steps=1)
                assert np.array_equal(one, via_pgd), (uid, eps)


# ---------------------------------------------------------------------------
# frozen victims and students


def test_victim_and_student_parameters_frozen(pipelines):
    with _verdict("frozen victim/student parameters"):
        for root in pipelines["wb"] + pipelines["bb"]:
            frozen = _attack_summary(root)["summary"]["frozen_checksums"]
            on_disk = {
                "pad": models.load_model(
                    root / "models" / "pad.ckpt").checksum(),
                "embedder": models.load_model(
                    root / "models" / "embedder.ckpt").checksum(),
            }
            for tag, want in on_disk.items():
                assert frozen[tag] == want, (root.name, tag)
            for sidecar in sorted((root / "attacks").glob("*.adv.json")):
                meta = json.loads(sidecar.read_text())
                assert meta["victim_checksums"]["pad"] == on_disk["pad"]
                assert meta["victim_checksums"]["embedder"] == \
                    on_disk["embedder"]

        for root in pipelines["bb"]:
            frozen = _attack_summary(root)["summary"]["frozen_checksums"]
            students = {
                "student_pad": root / "students" / "pad.ckpt",
                "student_bvector": root / "students" / "bvector.ckpt",
            }
            for tag, ckpt in students.items():
                fresh = models.load_model(ckpt).checksum()
                sidecar = json.loads(
                    ckpt.with_name(ckpt.name + ".json").read_text())
                assert fresh == sidecar["checksum"] == frozen[tag], \
                    (root.name, tag)


# ---------------------------------------------------------------------------
# directional orderings


def test_whitebox_transform_beats_grid(pipelines):
    with _verdict("white-box transform beats the grid"):
        wins = 0
        for root in pipelines["wb"]:
            rows = _report_rows(root)
            best_grid = max(rows[name]["eer_joint"] for name in GRID)
            if rows["transform"]["eer_joint"] > best_grid:
                wins += 1
        wall = pipelines["wb_wall"]
        assert wins >= 4, f"strict wins {wins}/5"
        assert wall < 900.0, f"white-box sweep took {wall:.0f}s"


def test_perturbation_displacement_ordering(pipelines):
    with _verdict("perturbation displacement ordering"):
        below = 0
        for root in pipelines["wb"]:
            sets = _attack_summary(root)["summary"]["sets"]
            disp = [sets[f"fgsm_eps{e:g}"]["median_displacement"]
                    for e in EPSILONS]
            assert all(a <= b for a, b in zip(disp, disp[1:])), \
                (root.name, disp)
            if sets["transform"]["median_displacement"] < disp[2]:
                below += 1
        assert below >= 4, f"transform below fgsm_eps2 in {below}/5"


def test_blackbox_students_transfer(pipelines):
    with _verdict("black-box student transfer"):
        raised = 0
        for root in pipelines["bb"]:
            agree = json.loads(
                (root / "students" / "agreement.json").read_text())
            assert agree["pad_agreement"] > 0.7, root.name
            assert agree["asv_agreement"] > 0.7, root.name
            rows = _report_rows(root)
            if rows["transform"]["eer_joint"] > rows["no_attack"]["eer_joint"]:
                raised += 1
        assert raised >= 4, f"joint EER raised in {raised}/5"


# ---------------------------------------------------------------------------
# determinism


def test_pipeline_reports_are_byte_identical(tmp_path):
    with _verdict("byte-identical reports"):
        cfg = tmp_path / "micro.ini"
        cfg.write_text(f"""\
[corpus]
n_speakers = 3
seed = 11
duration_min = 0.4
duration_max = 0.5
bonafide_train = 3
bonafide_dev = 2
bonafide_eval = 3
spoof_train = 3
spoof_dev = 2
spoof_eval = 2
n_enroll = 1

[models]
epochs = 3
patience = 3

[attack]
mode = blackbox
epsilons = 1.0,2.0
pgd_steps = 3
transform_epochs = 3

[output]
root = {tmp_path / 'unused'}
""")
        roots = [tmp_path / "run_a", tmp_path / "run_b"]
        for root in roots:
            assert harness.main(["all", "--config", str(cfg),
                                 "--out", str(root)]) == 0
        for fname in ("report.json", "report.tsv"):
            a = (roots[0] / "report" / fname).read_bytes()
            b = (roots[1] / "report" / fname).read_bytes()
            assert a == b, fname
