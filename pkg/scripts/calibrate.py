"""Medium-scale calibration of the experiment pipeline (dev utility)."""

import sys
import time

import numpy as np

from soundlm.experiments import Lab, LabConfig, paired_bootstrap_ci

CALIB_CFG = LabConfig(
    train_scenes=5_000,
    val_scenes=192,
    eval_scenes=128,
    codec_scenes=600,
    align_steps=60,
    pretrain_steps=1_000,
    pretrain_warmup=40,
    dpo_prompts=120,
    dpo_steps=100,
    adapt_steps=400,
    adapt_lr=3e-4,
    round1_scenes=800,
    sft1_steps=300,
    dpo1_prompts=80,
    dpo1_steps=60,
    round2_scenes=200,
    sft2_steps=300,
    reflect_prompts=64,
)


def main(cache_dir):
    lab = Lab(CALIB_CFG, cache_dir=cache_dir, verbose=True)
    cfg = lab.cfg
    t0 = time.time()
    model = lab.base_model()
    print(f"== base model ready in {time.time()-t0:.0f}s", flush=True)
    rows = lab.pretrain_metrics()
    print("loss first/last:", rows[0]["loss"], rows[-1]["loss"], flush=True)
    print("gen first/last:", rows[0]["loss_gen"], rows[-1]["loss_gen"], flush=True)
    print("und first/last:", rows[0]["loss_und"], rows[-1]["loss_und"], flush=True)

    scenes = lab.eval_scenes()
    per_lam = {}
    for lam in (1.0, 3.0, 8.0):
        t0 = time.time()
        per_lam[lam] = lab.eval_adherence(model, scenes, lam, seed=5)
        print(f"lam={lam}: CL={per_lam[lam].mean():.4f} ({time.time()-t0:.0f}s)", flush=True)
    lo, hi = paired_bootstrap_ci(per_lam[3.0] - per_lam[1.0], 2000, 0)
    print(f"CI(3-1) = [{lo:.4f}, {hi:.4f}]", flush=True)

    t0 = time.time()
    pairs = lab.dpo_pairs()
    print(f"pairs: {len(pairs)}/{cfg.dpo_prompts} = {len(pairs)/cfg.dpo_prompts:.2f} "
          f"({time.time()-t0:.0f}s)", flush=True)

    _, with_rows = lab.dpo_run("dpo_adapted", True, 1.0)
    _, cold_rows = lab.dpo_run("dpo_cold", False, 1.0)
    _, pure_rows = lab.dpo_run("dpo_pure", True, 0.0)
    early = max(1, len(with_rows) // 10)
    pw = max(r["dpo_loss"] for r in with_rows[:early])
    pc = max(r["dpo_loss"] for r in cold_rows[:early])
    print(f"early peak with-adapt={pw:.4f} cold={pc:.4f} ratio={pc/pw:.3f}", flush=True)
    d_ce = [r["divergence"] for r in with_rows if "divergence" in r][-1]
    d_pure = [r["divergence"] for r in pure_rows if "divergence" in r][-1]
    print(f"divergence ce1={d_ce:.4f} ce0={d_pure:.4f} "
          f"ratio={abs(d_ce)/max(abs(d_pure),1e-9):.3f}", flush=True)

    dpo_model, _ = lab.dpo_run("dpo_adapted", True, 1.0)
    a_base = lab.eval_adherence(lab.base_model(), scenes, 3.0, seed=6)
    a_dpo = lab.eval_adherence(dpo_model, scenes, 3.0, seed=6)
    lo, hi = paired_bootstrap_ci(a_dpo - a_base, 2000, 1)
    print(f"dpo gain: base={a_base.mean():.4f} dpo={a_dpo.mean():.4f} "
          f"CI=[{lo:.4f},{hi:.4f}]", flush=True)

    t0 = time.time()
    first, second, failures = lab.reflection_eval()
    print(f"reflection: first={first.mean():.4f} second={second.mean():.4f} "
          f"gain={second.mean()-first.mean():.4f} failures={failures} "
          f"({time.time()-t0:.0f}s)", flush=True)
    print("DONE", flush=True)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "/tmp/calib2")
