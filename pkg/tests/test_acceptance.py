"""Acceptance criteria 1-11 on the default toy setup.

Each test prints one ``[PASS]`` / ``[FAIL]`` line with the measured values.
The default pipeline is run once per session into a temporary directory and
shared by criteria 2, 3 and 5-11.
"""
import shutil
import time

import numpy as np
import pytest

from riskgen.diffusion import build_schedule, ddim_step, forward_diffuse, predict_z0
from riskgen.evaluation import frechet_embedding_distance
from riskgen.pipeline import Pipeline, RunConfig, ablate, run_experiment, single_threaded, sweep
from riskgen.sampler import GuidanceConfig, draw_conditions_and_noise, generate, guided_noise, sample_ddim
from toys import check_instance


@pytest.fixture
def verdict(capsys):
    def say(num, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
        assert ok, f"criterion {num}: {detail}"
    return say


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default-run")
    cfg = RunConfig(out=str(out))
    t0 = time.perf_counter()
    run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    snapshot = tmp_path_factory.mktemp("default-reports")
    shutil.copytree(out / "reports", snapshot / "reports")
    shutil.copytree(out / "plots", snapshot / "plots")
    return {"cfg": cfg, "out": out, "elapsed": elapsed, "snapshot": snapshot,
            "pipe": Pipeline(cfg, out, resume=True)}


def test_c01_ddim_oracle_round_trip(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    sched = build_schedule()
    z0 = rng.normal(size=(64, 16))
    eps = rng.normal(size=z0.shape)
    z = forward_diffuse(z0, sched.T, eps, sched)
    for t in range(sched.T, 0, -1):
        z = ddim_step(z, eps, t, sched)
    chain = float(np.abs(z - z0).max())
    ident = max(float(np.abs(predict_z0(forward_diffuse(z0, t, eps, sched), eps, t, sched) - z0).max())
                for t in range(1, sched.T + 1))
    dt = time.perf_counter() - t0
    verdict(1, chain < 1e-5 and ident < 1e-6 and dt < 1.0,
            f"chain err {chain:.2e}, z0 identity err {ident:.2e}, {dt:.3f}s")


def test_c02_reduction_law(default_run, verdict):
    pipe = default_run["pipe"]
    bundle, stats, sched = pipe.bundle(), pipe.category_stats(), pipe.schedule()
    t0 = time.perf_counter()
    cfg = GuidanceConfig(s=0.0, lam=0.0, screening=False, cfg_weight=pipe.cfg.guidance.cfg_weight)
    same = True
    with single_threaded():
        for y in range(6):
            out = generate(y, 10, bundle, stats[y], None, sched, cfg, seed=0)
            c, _, _, z_T = draw_conditions_and_noise(y, 10, 16, stats[y], None, cfg, 0)
            ref = sample_ddim(bundle.denoiser, z_T, c, bundle.embedder.embed_text(y), sched, cfg.cfg_weight)
            same &= np.array_equal(np.array([s.x for s in out]), ref.astype(np.float32).astype(np.float64))
    dt = time.perf_counter() - t0
    verdict(2, bool(same) and dt < 10, f"bitwise identical={bool(same)}, {dt:.2f}s")


def test_c03_guidance_displacement(default_run, verdict):
    pipe = default_run["pipe"]
    bundle, sched = pipe.bundle(), pipe.schedule()
    rng = np.random.default_rng(1)
    c = pipe.category_stats()[2].mu + 0.1 * rng.normal(size=(32, bundle.embedder.embed_dim))
    yt = bundle.embedder.embed_text(2)
    from riskgen.sampler import make_score_fn
    score = make_score_fn(bundle.classifier, bundle.embedder, 2, yt, 1e-4)
    worst, fired = 0.0, 0
    for s in (0.5, 10.0, 50.0):
        g = GuidanceConfig(s=s, cfg_weight=pipe.cfg.guidance.cfg_weight)
        for t in range(1, sched.T + 1):
            z = rng.normal(size=(32, 16)) * 2
            info = {}
            eps_hat = guided_noise(z, t, c, yt, bundle.denoiser, bundle.decoder, score, g, sched, info)
            eps = bundle.denoiser.guided_eps(z, t, c, yt, g.cfg_weight)
            d = np.linalg.norm(eps_hat - eps, axis=1)[info["fired"]]
            fired += len(d)
            worst = max(worst, float(np.abs(d - s * np.sqrt(1 - sched.alpha_bars[t])).max(initial=0.0)))
    verdict(3, worst < 1e-5 and fired > 0, f"max |disp - s sqrt(1-abar)| = {worst:.2e} over {fired} rows")


def test_c04_gradients(verdict):
    errs = [check_instance(seed) for seed in range(100)]
    verdict(4, max(errs) < 1e-3, f"max relative error {max(errs):.2e} over 100 instances")


def test_c05_s_trend(default_run, verdict):
    rows = sweep(default_run["cfg"], "s", [0, 1, 5, 10], out=default_run["out"])
    err = [r["error_rate"] for r in rows]
    mono = all(b >= a for a, b in zip(err, err[1:]))
    gain = err[-1] - err[0]
    verdict(5, mono and gain >= 0.10,
            "error over s=0,1,5,10: " + ", ".join(f"{e:.4f}" for e in err) + f"; rise {100 * gain:.1f}pp")


def test_c06_lambda_trend(default_run, verdict):
    rows = sweep(default_run["cfg"], "lambda", [0, 1e-4, 1e-2], out=default_run["out"])
    err = [r["error_rate"] for r in rows]
    conf = [r["conformity_rate"] for r in rows]
    ok = (all(b >= a for a, b in zip(conf, conf[1:])) and all(b <= a for a, b in zip(err, err[1:]))
          and conf[-1] - conf[0] >= 0.05)
    verdict(6, ok, "conformity " + ", ".join(f"{c:.4f}" for c in conf) + "; error "
            + ", ".join(f"{e:.4f}" for e in err) + f"; gain {100 * (conf[-1] - conf[0]):.1f}pp")


def test_c07_ablation_order(default_run, verdict):
    res = ablate(default_run["cfg"], out=default_run["out"])
    e = {a: res[a]["error_rate"] for a in res}
    sd = {a: res[a]["error_rate_sd"] for a in res}
    top = max(("Screening", "Gradient"), key=e.get)

    def geq(a, b):
        return e[a] >= e[b] - max(sd[a], sd[b])

    ok = geq("Both", "Screening") and geq("Both", "Gradient") and geq(top, "Base")
    verdict(7, ok, "  ".join(f"{a} {e[a]:.4f}±{sd[a]:.4f}" for a in ("Base", "Screening", "Gradient", "Both")))


def test_c08_frechet_oracle(verdict):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 4))
    zero = abs(frechet_embedding_distance(a, a))
    x = rng.normal(size=1000)
    x = (x - x.mean()) / x.std(ddof=1)
    uni = frechet_embedding_distance(x[:, None], x[:, None] + 1.0)
    b = rng.normal(size=(70, 4)) * 1.5 + 0.3
    sym = abs(frechet_embedding_distance(a, b) - frechet_embedding_distance(b, a))
    verdict(8, zero < 1e-8 and abs(uni - 1.0) < 1e-6 and sym < 1e-8,
            f"identical {zero:.1e}, univariate {uni:.9f}, asymmetry {sym:.1e}")


def test_c09_retraining_direction(default_run, verdict):
    import json
    rt = json.loads((default_run["out"] / "reports" / "retrain.json").read_text())
    rd, ml = rt["generated"]["delta"], rt["mislabeled"]["delta"]
    ok = (rd["id"]["mean"] + rd["id"]["sd"] >= -0.005 and rd["ood"]["mean"] + rd["ood"]["sd"] >= 0
          and ml["ood"]["mean"] < rd["ood"]["mean"])
    verdict(9, ok, f"ID delta {100 * rd['id']['mean']:+.2f}±{100 * rd['id']['sd']:.2f}pp, "
            f"OOD delta {100 * rd['ood']['mean']:+.2f}±{100 * rd['ood']['sd']:.2f}pp, "
            f"mislabeled OOD delta {100 * ml['ood']['mean']:+.2f}pp")


def test_c10_validation_size(default_run, verdict):
    rows = sweep(default_run["cfg"], "val_fraction", [0.1, 1.0], out=default_run["out"])
    diff = abs(rows[0]["error_rate"] - rows[1]["error_rate"])
    verdict(10, diff <= 0.05, f"error {rows[0]['error_rate']:.4f} at 0.1 vs {rows[1]['error_rate']:.4f} at 1.0")


def test_c11_full_pipeline(default_run, tmp_path, verdict):
    t0 = time.perf_counter()
    run_experiment(RunConfig(out=str(tmp_path)), tmp_path)
    second = time.perf_counter() - t0
    snap = default_run["snapshot"]
    names = sorted(p.relative_to(snap) for p in snap.rglob("*") if p.is_file())
    same = all((tmp_path / n).read_bytes() == (snap / n).read_bytes() for n in names)
    assert sorted(p.relative_to(tmp_path) for p in (tmp_path / "reports").rglob("*") if p.is_file()) == \
        [n for n in names if n.parts[0] == "reports"]
    verdict(11, default_run["elapsed"] < 600 and second < 600 and same,
            f"runs took {default_run['elapsed']:.0f}s and {second:.0f}s; {len(names)} report/plot files "
            f"byte-identical={same}")
