"""End-to-end acceptance checks, one test per criterion.

The overfit benchmark and its three ablations are trained once per session
(about 20 minutes on one CPU core). Each test records a verdict line that the
conftest prints in the terminal summary.
"""
import itertools
import time

import numpy as np
import pytest

from conftest import VERDICTS
from dsffnet import autodiff as ad
from dsffnet import model as M
from dsffnet.checkpoint import load_checkpoint, save_checkpoint
from dsffnet.cli import PRESETS, main, run_gradcheck
from dsffnet.losses import chamfer, emd, pmd
from dsffnet.mesh import Mesh, add_vertex_noise, normalize_mesh
from dsffnet.synthetic import BENCHMARK, gen_identity, gen_pose, make_dataset, select, skin
from dsffnet.training import (OptimizerState, TrainConfig, adamw_step, evaluate, lr_at_epoch,
                              mean_edge_loss, prepare, train)


def verdict(num, ok, detail):
    VERDICTS[num] = (bool(ok), detail)
    assert ok, detail


def overfit_config(**overrides):
    return TrainConfig.from_dict(dict(TrainConfig().to_dict(), **PRESETS["overfit"], **overrides))


@pytest.fixture(scope="session")
def bench_data():
    triples, _ = make_dataset(**BENCHMARK)
    return triples


class Run:
    def __init__(self, config, triples):
        t0 = time.perf_counter()
        self.result = train(config, triples)
        self.seconds = time.perf_counter() - t0
        self.config = config
        self.params = self.result.checkpoint.params
        self.model_cfg = config.model_config()
        self.metrics = evaluate(self.params, self.model_cfg, triples)
        held = [t for t in triples if t.split != "train"]
        self.held_pmd = float(np.mean([pmd(self.predict(t), prepare(t).gt) for t in held]))
        self.held_edge = mean_edge_loss(self.params, self.model_cfg, held)

    def predict(self, triple, src=None):
        item = prepare(triple)
        s = item.src if src is None else src
        return M.predict(M.as_tensors(self.params), self.model_cfg, s, item.tgt).data.T


@pytest.fixture(scope="session")
def runs(bench_data):
    cache = {}

    def get(name):
        if name not in cache:
            overrides = {"full": {}, "spadain": {"variant": "spadain"},
                         "no-target-side": {"variant": "no-target-side"}, "no-edge": {"lam": 0.0}}
            cache[name] = Run(overfit_config(**overrides[name]), bench_data)
        return cache[name]
    return get


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1)
def test_gradient_fidelity(capsys):
    small = M.ModelConfig(enc_widths=(8, 16), code_dim=32, dec_widths=(8, 16, 8))
    full = M.ModelConfig()
    lines = []
    ok = True
    for label, cfg, argv in (("small", small, []),
                             ("full", full, ["--enc-widths", "64,128", "--code-dim", "1024",
                                             "--dec-widths", "64,128,64"])):
        t0 = time.perf_counter()
        code = main(["gradcheck", "--vertices", "16"] + argv)
        secs = time.perf_counter() - t0
        report = run_gradcheck(cfg, 16, 0, 0.0005, max_entries=12)
        worst = max(report.values())
        has_ab = any(k.endswith(".alpha") for k in report) and any(k.endswith(".beta") for k in report)
        ok &= code == 0 and worst <= 1e-4 and secs < 120 and has_ab
        lines.append(f"{label} max_rel={worst:.2e} exit={code} {secs:.1f}s")
    capsys.readouterr()
    verdict(1, ok, "; ".join(lines) + " (tol 1e-4, <120s)")


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2)
def test_permutation_invariance():
    p = M.as_tensors(M.init_params(M.ModelConfig(), 0))
    rng = np.random.default_rng(2)
    bad = 0
    for i in range(100):
        n = int(rng.integers(4, 400))
        v = rng.normal(size=(3, n)) * rng.uniform(0.1, 3)
        perm = rng.permutation(n)
        a = M.encode_pose(p, v).data
        b = M.encode_pose(p, v[:, perm]).data
        bad += not np.array_equal(a, b)
    verdict(2, bad == 0, f"{100 - bad}/100 codes bit-identical after shuffling")


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3)
def test_ffadain_degeneracy():
    rng = np.random.default_rng(3)
    c, n, mix = 16, 40, 1027
    h = ad.Tensor(rng.normal(size=(c, n)) * 3 + 1)
    f = ad.Tensor(rng.normal(size=(mix, n)))
    v = ad.Tensor(rng.normal(size=(3, n)))
    raw = {}
    for side, fan in (("id1", 3), ("id2", 3), ("mix1", mix), ("mix2", mix)):
        raw[f"u.{side}.W"] = rng.normal(size=(c, fan))
        raw[f"u.{side}.b"] = rng.normal(size=c)
    raw["u.alpha"], raw["u.beta"] = np.array(1.0), np.array(1.0)
    ff, _ = M.ffadain_forward(M.as_tensors(raw), "u", h, f, v)
    sp, _ = M.spadain_forward(M.as_tensors(raw), "u", h, v)
    d1 = float(np.abs(ff.data - sp.data).max())
    for side in ("id1", "id2", "mix1", "mix2"):
        raw[f"u.{side}.W"] = np.zeros_like(raw[f"u.{side}.W"])
        raw[f"u.{side}.b"] = np.full(c, 1.0 if side.endswith("1") else 0.0)
    raw["u.alpha"], raw["u.beta"] = np.array(0.3), np.array(0.8)
    ff0, _ = M.ffadain_forward(M.as_tensors(raw), "u", h, f, v)
    d2 = float(np.abs(ff0.data - ad.instance_norm(h)[0].data).max())
    verdict(3, d1 <= 1e-12 and d2 <= 1e-12,
            f"|FFAdaIN(a=b=1) - SPAdaIN| = {d1:.1e}, |FFAdaIN(g=1,d=0) - IN| = {d2:.1e} (tol 1e-12)")


# ---------------------------------------------------------------- 4

def _emd_brute(a, b):
    d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
    n = len(a)
    return min(d[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


@pytest.mark.criterion(4)
def test_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(200):
        n = 1 + i % 7
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        worst = max(worst, abs(emd(a, b) - _emd_brute(a, b)))
    hand = [
        (chamfer([[0, 0, 0]], [[1, 0, 0]]), 2.0),
        (chamfer([[0, 0, 0]], [[0, 0, 0], [1, 0, 0]]), 0.5),
        (chamfer([[0, 0, 0], [2, 0, 0]], [[0, 0, 0], [2, 0, 0]]), 0.0),
        (pmd([[0, 0, 1], [0, 0, 0]], [[0, 0, 0], [0, 0, 0]]), 0.5),
        (pmd([[1, 2, 2]], [[0, 0, 0]]), 9.0),
    ]
    hand_err = max(abs(x - y) for x, y in hand)
    verdict(4, worst <= 1e-12 and hand_err <= 1e-12,
            f"EMD vs brute force over 200 instances N<=7: max diff {worst:.1e}; "
            f"chamfer/PMD hand values max diff {hand_err:.1e}")


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5)
def test_overfit_convergence(runs):
    run = runs("full")
    cfg = run.config
    train_pmd = run.metrics["train"].pmd
    ok = (train_pmd <= 1e-3 and run.seconds < 900 and cfg.lr0 == 1e-3 and cfg.lam == 0.0005
          and cfg.batch_size == 8 and run.result.checkpoint.state.step == 500)
    verdict(5, ok, f"training PMD {train_pmd:.3e} after {run.result.checkpoint.state.step} steps "
                   f"in {run.seconds:.0f}s (need <=1e-3, <900s)")


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6)
def test_ablation_direction(runs):
    full, sp, nt, ne = runs("full"), runs("spadain"), runs("no-target-side"), runs("no-edge")
    ok = full.held_pmd < sp.held_pmd and full.held_pmd < nt.held_pmd and full.held_edge < ne.held_edge
    verdict(6, ok, f"held-out PMD full {full.held_pmd:.3e} vs spadain {sp.held_pmd:.3e}, "
                   f"no-target-side {nt.held_pmd:.3e}; held-out edge loss lam=5e-4 "
                   f"{full.held_edge:.3e} vs lam=0 {ne.held_edge:.3e}")


# ---------------------------------------------------------------- 7

@pytest.mark.criterion(7)
def test_cross_vertex_count(runs):
    run = runs("full")
    m300 = normalize_mesh(skin(gen_identity(11, 2, (12, 12)), gen_pose(12, 2)))
    m500 = normalize_mesh(skin(gen_identity(13, 2, (20, 12)), gen_pose(14, 2)))
    results = []
    for src, tgt in ((m300, m500), (m500, m300)):
        out = M.transfer(run.params, run.model_cfg, src, tgt)
        results.append(out.n_vertices == tgt.n_vertices and np.array_equal(out.faces, tgt.faces)
                       and bool(np.isfinite(out.vertices).all()))
        Mesh(out.vertices, out.faces)  # re-validates faces against the vertex count
    verdict(7, all(results) and m300.n_vertices == 300 and m500.n_vertices == 500,
            f"300->500 ok={results[0]}, 500->300 ok={results[1]}")


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8)
def test_noise_robustness(runs, bench_data):
    run = runs("full")
    train_pmd = run.metrics["train"].pmd
    triples = select(bench_data, "train")
    sigmas = (0.01, 0.03, 0.05)
    means = []
    for sigma in sigmas:
        vals = []
        for i, t in enumerate(triples):
            item = prepare(t)
            clean = run.predict(t)
            noisy_src = add_vertex_noise(Mesh(item.src.T.copy()), sigma, 1000 + i).vertices.T
            vals.append(pmd(run.predict(t, noisy_src), clean))
        means.append(float(np.mean(vals)))
    finite = all(np.isfinite(means))
    monotone = all(a <= b for a, b in zip(means, means[1:]))
    bound = means[-1] <= 50 * train_pmd
    verdict(8, finite and monotone and bound,
            "PMD vs clean output at sigma 0.01/0.03/0.05 = "
            + "/".join(f"{m:.2e}" for m in means)
            + f"; bound 50 x training PMD = {50 * train_pmd:.2e}")


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9)
def test_schedule_and_optimizer():
    cfg = TrainConfig()
    lrs = [lr_at_epoch(cfg, e) for e in (0, 8, 16)]
    sched_ok = lrs == [1e-3, 8e-4, 6.4e-4]
    # constant gradient 0.5, lr 1e-3, wd 1e-2, eps 1e-8: worked by hand
    expected = [0.99899000002, 0.99798001014, 0.99697003036]
    params = {"x.W": np.array(1.0)}
    state = OptimizerState.zeros_like(params)
    got = []
    for _ in range(3):
        adamw_step(params, {"x.W": np.array(0.5)}, state, 1e-3, cfg)
        got.append(float(params["x.W"]))
    # the hand values carry 11 decimals, so compare the exact recurrence to 1e-12 as well
    exact, ref = 1.0, []
    for _ in range(3):
        exact = exact * (1 - 1e-3 * 1e-2) - 1e-3 * 0.5 / (0.5 + 1e-8)
        ref.append(exact)
    err_exact = max(abs(a - b) for a, b in zip(got, ref))
    err_hand = max(abs(a - b) for a, b in zip(got, expected))
    verdict(9, sched_ok and err_exact <= 1e-12 and err_hand <= 1e-10,
            f"lr at epochs 0/8/16 = {lrs}; AdamW 3-step max error {err_exact:.1e}")


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10)
def test_persistence(runs, bench_data, tmp_path):
    ck = runs("full").result.checkpoint
    save_checkpoint(ck, tmp_path / "full.ckpt")
    back = load_checkpoint(tmp_path / "full.ckpt")
    bitwise = all(ck.params[k].tobytes() == back.params[k].tobytes() for k in ck.params)
    bitwise &= all(ck.state.m[k].tobytes() == back.state.m[k].tobytes() for k in ck.state.m)
    bitwise &= all(ck.state.v[k].tobytes() == back.state.v[k].tobytes() for k in ck.state.v)
    bitwise &= set(ck.params) == set(back.params) and back.state.step == ck.state.step

    small = dict(enc_widths=(8, 16), code_dim=32, dec_widths=(8, 16, 8), batch_size=8, seed=7)
    k = 2
    uninterrupted = train(TrainConfig(epochs=k + 1, **small), bench_data)
    first = train(TrainConfig(epochs=k, **small), bench_data)
    save_checkpoint(first.checkpoint, tmp_path / "k.ckpt")
    resumed = train(TrainConfig(epochs=k + 1, **small), bench_data,
                    resume=load_checkpoint(tmp_path / "k.ckpt"))
    same_row = resumed.log_rows[0] == uninterrupted.log_rows[k]
    verdict(10, bitwise and same_row,
            f"checkpoint round trip bitwise={bitwise}; resumed epoch {k} row equal={same_row}")
