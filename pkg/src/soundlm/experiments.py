"""Desk-scale experiment pipeline and the ablation experiments.

``Lab`` owns the artifact chain -- world corpora, codec books, the staged
base model, preference-optimization variants, and the two reasoning
rounds -- with every trained artifact cached on disk under a config hash,
so experiments and the acceptance suite can share one set of runs.

Experiments (``run_experiment``):

* ``cfg_sweep``        adherence versus guidance weight on held-out prompts;
* ``data_scaling``     train/validation loss gap versus corpus fraction;
* ``dpo_adaptation``   early preference-loss spike with and without the
                       adaptation stage;
* ``ce_divergence``    reference divergence with and without the CE term;
* ``reflection_gain``  first- versus second-pass adherence of the
                       reflection loop.

Every experiment is deterministic given its seeds and emits a CSV whose
metric columns reuse the conventional abbreviations (CL for the adherence
analog) plus a pass/fail verdict against the acceptance thresholds.
"""

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec, dpo as dpo_mod, reason, world
from .data import prompt_ids, scene_samples, uncond_prompt_ids
from .errors import ConfigError, PlanParseError, StageError
from .layout import pack_single
from .model import Model, ModelConfig
from .sampling import SamplerParams, generate
from .train import BlendSpec, StageConfig, run_stage
from .vocab import default_vocab

EXPERIMENT_NAMES = (
    "cfg_sweep",
    "data_scaling",
    "dpo_adaptation",
    "ce_divergence",
    "reflection_gain",
)


@dataclass
class LabConfig:
    # world corpora
    train_scenes: int = 20_000
    val_scenes: int = 512
    eval_scenes: int = 256
    codec_scenes: int = 1_200
    events_min: int = 1
    events_max: int = 3
    frames_min: int = 32
    frames_max: int = 48
    noise_amp: float = 0.08
    # model
    layers: int = 2
    dim: int = 128
    heads: int = 4
    ff: int = 512
    context: int = 1024
    n_q: int = 8
    codebook_size: int = 64
    dtype: str = "float32"
    # stages (alignment lr/batch are 5x the pretraining peak, mirroring the
    # large-batch warm-up recipe at 1/1000 of the production step counts)
    align_steps: int = 120
    align_lr: float = 2.5e-3
    align_tokens: int = 20_480
    pretrain_steps: int = 2_000
    pretrain_lr: float = 5e-4
    pretrain_warmup: int = 60
    pretrain_tokens: int = 4_096
    pack_budget: int = 256
    # preference optimization; adaptation must fit the winners closely or
    # the CE regularizer keeps pushing during DPO. Production DPO runs at a
    # small fraction of the pretraining rate; the two Fig-5-style ablation
    # experiments probe at 5x that, where the early-phase instability the
    # adaptation stage prevents is visible at desk scale.
    dpo_prompts: int = 250
    dpo_candidates: int = 10
    dpo_steps: int = 60
    dpo_lr: float = 1e-5
    dpo_ablation_steps: int = 150
    dpo_ablation_lr: float = 5e-5
    adapt_steps: int = 200
    adapt_lr: float = 2e-4
    # reasoning rounds
    round1_scenes: int = 2_500
    sft1_steps: int = 800
    sft1_lr: float = 3e-4
    dpo1_prompts: int = 250
    dpo1_steps: int = 60
    round2_scenes: int = 600
    sft2_steps: int = 800
    sft2_lr: float = 2e-4
    reflect_prompts: int = 200
    # evaluation
    sweep_lams: tuple = (1.0, 2.0, 3.0, 5.0, 8.0)
    top_k: int = 20
    bootstrap_draws: int = 2_000
    seed: int = 0

    def model_config(self):
        return ModelConfig(
            layers=self.layers, dim=self.dim, heads=self.heads, ff=self.ff,
            context=self.context, n_q=self.n_q, codebook_size=self.codebook_size,
            dtype=self.dtype, frame_dim=16, enc_dim=64,
        )

    def world_config(self):
        return world.WorldConfig(
            events_min=self.events_min, events_max=self.events_max,
            frames_min=self.frames_min, frames_max=self.frames_max,
            noise_amp=self.noise_amp,
        )

    def digest(self):
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True, default=str).encode()
        ).hexdigest()[:12]


def paired_bootstrap_ci(diffs, draws=2_000, seed=0, level=0.95):
    """Percentile CI of the mean of paired differences."""
    diffs = np.asarray(diffs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diffs), size=(draws, len(diffs)))
    means = diffs[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(means, alpha)), float(np.quantile(means, 1.0 - alpha))


class Lab:
    """Artifact pipeline with on-disk caching keyed by the config digest."""

    def __init__(self, cfg=None, cache_dir=None, verbose=False):
        self.cfg = cfg or LabConfig()
        root = cache_dir or os.environ.get("UALM_DATA_DIR") or ".cache/soundlm"
        self.dir = os.path.join(root, self.cfg.digest())
        os.makedirs(self.dir, exist_ok=True)
        self.vocab = default_vocab(self.cfg.n_q, self.cfg.codebook_size)
        self.verbose = verbose
        self._mem = {}
        self._checksums = {}

    def _say(self, message):
        if self.verbose:
            print(f"[lab] {message}", flush=True)

    def path(self, name):
        return os.path.join(self.dir, name)

    # ------------------------------------------------------------- corpora

    def _scenes(self, key, count, seed):
        if key not in self._mem:
            self._say(f"building {count} scenes for {key}")
            self._mem[key] = world.build_scenes(count, seed, self.cfg.world_config())
        return self._mem[key]

    def train_scenes(self):
        return self._scenes("train", self.cfg.train_scenes, 1_000 + self.cfg.seed)

    def val_scenes(self):
        return self._scenes("val", self.cfg.val_scenes, 2_000 + self.cfg.seed)

    def eval_scenes(self):
        return self._scenes("eval", self.cfg.eval_scenes, 3_000 + self.cfg.seed)

    def books(self):
        if "books" not in self._mem:
            path = self.path("codec.urvq")
            if os.path.exists(path):
                self._mem["books"] = codec.load_codebooks(path)
            else:
                self._say("training codec books")
                frames = np.concatenate(
                    [s.frames for s in self.train_scenes()[: self.cfg.codec_scenes]],
                    axis=0,
                )
                rvq = codec.RvqConfig(n_q=self.cfg.n_q, K=self.cfg.codebook_size, D=16)
                books = codec.train_codebooks(frames, rvq, seed=self.cfg.seed, iters=40)
                codec.save_codebooks(path, books)
                self._mem["books"] = books
        return self._mem["books"]

    def grids(self, scenes, key):
        mem_key = f"grids_{key}_{len(scenes)}"
        if mem_key not in self._mem:
            books = self.books()
            self._mem[mem_key] = [codec.encode_sequence(s.frames, books) for s in scenes]
        return self._mem[mem_key]

    def corpus(self, scenes, key, fraction=1.0):
        """t2a / understand / text sample datasets for a scene list."""
        n = max(1, int(len(scenes) * fraction))
        mem_key = f"corpus_{key}_{n}"
        if mem_key not in self._mem:
            grids = self.grids(scenes, key)
            datasets = {"t2a": [], "understand": [], "text": []}
            for i, scene in enumerate(scenes[:n]):
                rng = np.random.default_rng((77, self.cfg.seed, i))
                t2a, und, text = scene_samples(
                    self.vocab, self.cfg.n_q, scene, grids[i], i, rng
                )
                datasets["t2a"].append(t2a)
                datasets["understand"].append(und)
                datasets["text"].append(text)
            self._mem[mem_key] = datasets
        return self._mem[mem_key]

    # -------------------------------------------------------------- stages

    def _record_checksums(self, stage, model, when):
        entry = self._checksums.setdefault(stage, {})
        entry[when] = {g: model.param_checksum(g) for g in model.group_names()}
        with open(self.path("checksums.json"), "w") as f:
            json.dump(self._checksums, f, indent=1, sort_keys=True)

    def stage_checksums(self):
        path = self.path("checksums.json")
        if not self._checksums and os.path.exists(path):
            with open(path) as f:
                self._checksums = json.load(f)
        return self._checksums

    def _cached_model(self, name, builder):
        if name in self._mem:
            return self._mem[name]
        path = self.path(f"{name}.ualm")
        if os.path.exists(path):
            model = Model.load(path, vocab=self.vocab)
        else:
            model = builder()
            model.save(path)
        self._mem[name] = model
        return model

    def base_model(self):
        """Modality alignment (frozen backbone+encoder) then full pretraining
        with the 40/30/30 generation/understanding/text blend."""

        def build():
            cfg = self.cfg
            self._say("initializing model")
            model = Model(cfg.model_config(), self.vocab, seed=cfg.seed)
            datasets = self.corpus(self.train_scenes(), "train")
            blend = BlendSpec.pretraining_default()
            self._record_checksums("alignment", model, "before")
            align = StageConfig(
                name="alignment", total_steps=cfg.align_steps, peak_lr=cfg.align_lr,
                schedule="constant", warmup=0, tokens_per_batch=cfg.align_tokens,
                pack_budget=cfg.pack_budget, frozen=("backbone", "encoder"),
                seed=cfg.seed + 11,
            )
            self._say(f"alignment: {cfg.align_steps} steps")
            run_stage(model, datasets, align, blend, log_path=self.path("align_metrics.csv"))
            self._record_checksums("alignment", model, "after")
            self._record_checksums("pretrain", model, "before")
            pre = StageConfig(
                name="pretrain", total_steps=cfg.pretrain_steps, peak_lr=cfg.pretrain_lr,
                schedule="cosine", warmup=cfg.pretrain_warmup,
                tokens_per_batch=cfg.pretrain_tokens, pack_budget=cfg.pack_budget,
                frozen=("encoder",), seed=cfg.seed + 13,
            )
            self._say(f"pretrain: {cfg.pretrain_steps} steps")
            run_stage(model, datasets, pre, blend, log_path=self.path("pretrain_metrics.csv"))
            self._record_checksums("pretrain", model, "after")
            return model

        return self._cached_model("base", build)

    def pretrain_metrics(self):
        self.base_model()
        with open(self.path("pretrain_metrics.csv")) as f:
            return list(csv.DictReader(f))

    # ------------------------------------------------------------ decoding

    def generate_audio(self, model, prompt_text, max_frames, lam, seed):
        cond = prompt_ids(self.vocab, prompt_text, "audio")
        unc = uncond_prompt_ids(self.vocab, "audio")
        params = SamplerParams(
            lam=lam, top_k=self.cfg.top_k, max_frames=max_frames, seed=seed
        )
        return generate(model, cond, "audio", params, uncond_prompt_ids=unc)

    def eval_adherence(self, model, scenes, lam, seed):
        """Per-prompt oracle adherence of guided generations."""
        books = self.books()
        out = np.zeros(len(scenes))
        for i, scene in enumerate(scenes):
            prompt = scene.short_prompt if i % 2 == 0 else scene.abstract_prompt
            res = self.generate_audio(
                model, prompt, scene.total_frames, lam, seed * 7_919 + i
            )
            if res.grid is None:
                continue
            frames = codec.decode_sequence(res.grid, books)
            out[i] = world.adherence_score(frames, scene.caption)
        return out

    def dataset_loss(self, model, datasets):
        num = den = 0.0
        for samples in datasets.values():
            for s in samples:
                loss, _ = model.loss(pack_single(s))
                w = s.effective_tokens()
                num += loss * w
                den += w
        return num / den

    # ---------------------------------------------------- preference stack

    def dpo_prompts_scenes(self):
        rng = np.random.default_rng(self.cfg.seed + 17)
        scenes = self.train_scenes()
        idx = rng.choice(len(scenes), size=self.cfg.dpo_prompts, replace=False)
        return [scenes[i] for i in idx]

    def dpo_pairs(self):
        """Preference pairs for the base model, judged by the full oracle."""
        path = self.path("pairs.jsonl")
        if os.path.exists(path):
            return dpo_mod.read_pairs(path)
        self._say("generating preference candidates")
        model = self.base_model()
        books = self.books()
        pairs = []
        cfg = dpo_mod.DpoConfig(candidates_per_prompt=self.cfg.dpo_candidates)
        for i, scene in enumerate(self.dpo_prompts_scenes()):
            prompt = scene.short_prompt if i % 2 == 0 else scene.abstract_prompt
            cands = dpo_mod.generate_candidates(
                model, prompt, books, self.cfg.dpo_candidates, scene.total_frames,
                sampler_kwargs={"top_k": self.cfg.top_k}, seed=self.cfg.seed * 31 + i,
            )
            if len(cands) < 2:
                continue
            pair = dpo_mod.select_pairs(
                prompt, cands, lambda f, c=scene.caption: world.oracle_judge(f, c), cfg
            )
            if pair is not None:
                pair.id = f"pair{i}"
                pairs.append(pair)
        dpo_mod.write_pairs(path, pairs)
        return pairs

    def adapted_and_ref(self):
        """Adaptation stage on the winners; returns (model, frozen ref)."""

        def build():
            model = self.base_model().clone()
            pairs = self.dpo_pairs()
            winners, _ = dpo_mod.pair_samples(self.vocab, self.cfg.n_q, pairs)
            self._say(f"adaptation: {self.cfg.adapt_steps} steps on {len(winners)} winners")
            dpo_mod.adapt(
                model, winners, self.cfg.adapt_steps, lr=self.cfg.adapt_lr,
                seed=self.cfg.seed + 19, pack_budget=self.cfg.pack_budget,
            )
            self._record_checksums("adapt", model, "after")
            return model

        model = self._cached_model("adapted", build)
        return model, model.clone()

    def dpo_run(self, name, start_from_adapted, ce_weight, steps=None, lr=None):
        """One DPO training run; returns (model, log rows) with rows cached."""
        steps = steps or self.cfg.dpo_steps
        rows_path = self.path(f"{name}_log.json")

        def build():
            pairs = self.dpo_pairs()
            if start_from_adapted:
                model, ref = self.adapted_and_ref()
                model = model.clone()
            else:
                model = self.base_model().clone()
                ref = self.base_model().clone()
            cfg = dpo_mod.DpoConfig(
                ce_weight=ce_weight, lr=lr or self.cfg.dpo_lr, seed=self.cfg.seed + 23,
            )
            self._say(f"dpo run {name}: {steps} steps, ce={ce_weight}")
            rows = dpo_mod.dpo_train(
                model, ref, pairs, cfg, steps, budget=self.cfg.pack_budget
            )
            with open(rows_path, "w") as f:
                json.dump(rows, f)
            self._record_checksums(name, model, "after")
            return model

        model = self._cached_model(name, build)
        with open(rows_path) as f:
            return model, json.load(f)

    # ----------------------------------------------------- reasoning rounds

    def round1_scene_slice(self):
        return self.train_scenes()[: self.cfg.round1_scenes]

    def sft1_model(self):
        def build():
            model = self.base_model().clone()
            scenes = self.round1_scene_slice()
            grids = self.grids(scenes, "train")[: len(scenes)]
            self._say("building round-1 dataset")
            round1 = reason.build_round1(scenes, grids, self.vocab, self.cfg.n_q)
            und = self.corpus(self.train_scenes(), "train")["understand"]
            datasets = {"round1": round1, "understand": und}
            stage = StageConfig(
                name="sft1", total_steps=self.cfg.sft1_steps, peak_lr=self.cfg.sft1_lr,
                schedule="constant", warmup=20, tokens_per_batch=self.cfg.pretrain_tokens,
                pack_budget=self.cfg.pack_budget, frozen=("encoder",),
                seed=self.cfg.seed + 29,
            )
            self._say(f"sft1: {self.cfg.sft1_steps} steps")
            run_stage(model, datasets, stage, BlendSpec.sft_default(["round1"]),
                      log_path=self.path("sft1_metrics.csv"))
            self._record_checksums("sft1", model, "after")
            return model

        return self._cached_model("sft1", build)

    def dpo1_model(self):
        """Round-1 preference step, judged on keywords only."""

        def build():
            model = self.sft1_model().clone()
            books = self.books()
            rng = np.random.default_rng(self.cfg.seed + 37)
            scenes = self.round1_scene_slice()
            idx = rng.choice(len(scenes), size=min(self.cfg.dpo1_prompts, len(scenes)),
                             replace=False)
            cfg = dpo_mod.DpoConfig(lr=self.cfg.dpo_lr, seed=self.cfg.seed + 41)
            pairs = []
            self._say("round-1 preference pairs (keyword judge)")
            for i in idx:
                scene = scenes[i]
                prompt = scene.short_prompt if i % 2 == 0 else scene.abstract_prompt
                cands = dpo_mod.generate_candidates(
                    model, prompt, books, self.cfg.dpo_candidates, scene.total_frames,
                    sampler_kwargs={"top_k": self.cfg.top_k},
                    seed=self.cfg.seed * 43 + int(i),
                )
                if len(cands) < 2:
                    continue
                keywords = list(scene.caption.keywords)
                pair = dpo_mod.select_pairs(
                    prompt, cands,
                    lambda f, kw=keywords: world.oracle_judge(f, kw), cfg,
                )
                if pair is not None:
                    pair.id = f"r1pair{i}"
                    pairs.append(pair)
            if len(pairs) < 2:
                self._say("too few round-1 pairs; keeping the SFT-1 model")
                return model
            winners, _ = dpo_mod.pair_samples(self.vocab, self.cfg.n_q, pairs)
            ref = dpo_mod.adapt(model, winners, steps=self.cfg.adapt_steps // 2,
                                lr=self.cfg.adapt_lr, seed=self.cfg.seed + 47,
                                pack_budget=self.cfg.pack_budget)
            self._say(f"dpo1: {self.cfg.dpo1_steps} steps on {len(pairs)} pairs")
            dpo_mod.dpo_train(model, ref, pairs, cfg, self.cfg.dpo1_steps,
                              budget=self.cfg.pack_budget)
            return model

        return self._cached_model("dpo1", build)

    def sft2_model(self):
        """Round 2: reflection traces mixed with round-1 data and 20%
        understanding records."""

        def build():
            dpo1 = self.dpo1_model()
            model = dpo1.clone()
            scenes = self.train_scenes()
            r2_scenes = scenes[self.cfg.round1_scenes :
                               self.cfg.round1_scenes + self.cfg.round2_scenes]
            books = self.books()
            self._say(f"building {len(r2_scenes)} reflection traces")
            reflect_samples, traces = reason.build_round2(
                dpo1, r2_scenes, books, self.vocab, self.cfg.n_q,
                seed=self.cfg.seed + 53,
            )
            with open(self.path("round2_traces.jsonl"), "w") as f:
                for t, s in zip(traces, reflect_samples):
                    f.write(json.dumps(t.to_record(s.id), sort_keys=True) + "\n")
            r1_scenes = self.round1_scene_slice()
            round1 = reason.build_round1(
                r1_scenes, self.grids(r1_scenes, "train")[: len(r1_scenes)],
                self.vocab, self.cfg.n_q,
            )
            und = self.corpus(self.train_scenes(), "train")["understand"]
            datasets = {"reflect": reflect_samples, "round1": round1, "understand": und}
            stage = StageConfig(
                name="sft2", total_steps=self.cfg.sft2_steps, peak_lr=self.cfg.sft2_lr,
                schedule="constant", warmup=20,
                tokens_per_batch=self.cfg.pretrain_tokens,
                # reflection traces carry two audio spans and two plans
                pack_budget=max(self.cfg.pack_budget, 384),
                frozen=("encoder",), seed=self.cfg.seed + 59,
            )
            self._say(f"sft2: {self.cfg.sft2_steps} steps")
            run_stage(model, datasets, stage,
                      BlendSpec.sft_default(["reflect", "round1"]),
                      log_path=self.path("sft2_metrics.csv"))
            self._record_checksums("sft2", model, "after")
            return model

        return self._cached_model("sft2", build)

    def reflection_eval(self, n_prompts=None, seed=None):
        """(first-pass, second-pass) adherence of the reflection loop on
        held-out prompts, judged against the model's own plan."""
        model = self.sft2_model()
        books = self.books()
        n = n_prompts or self.cfg.reflect_prompts
        seed = self.cfg.seed + 61 if seed is None else seed
        scenes = self.eval_scenes()[:n]
        first, second, failures = [], [], 0

        def tolerant_listen(frames):
            try:
                return reason.model_listen(model, frames)
            except PlanParseError:
                return world.RichCaption(keywords=[], layout=[], description={})

        for i, scene in enumerate(scenes):
            prompt = scene.short_prompt if i % 2 == 0 else scene.abstract_prompt
            try:
                trace = reason.self_reflect(
                    model, prompt,
                    SamplerParams(lam=3.0, top_k=self.cfg.top_k, seed=seed * 101 + i),
                    books, listen_fn=tolerant_listen,
                    max_frames=scene.total_frames,
                )
            except StageError:
                failures += 1
                continue
            a1 = world.adherence_score(
                codec.decode_sequence(trace.grid1, books), trace.planned
            )
            grid2 = trace.grid1 if trace.grid2 is None else trace.grid2
            a2 = world.adherence_score(
                codec.decode_sequence(grid2, books), trace.planned
            )
            first.append(a1)
            second.append(a2)
        return np.asarray(first), np.asarray(second), failures


# ------------------------------------------------------------- experiments


@dataclass
class ExperimentSpec:
    name: str
    out_dir: str
    seeds: tuple = (0,)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENT_NAMES:
            raise ConfigError(f"unknown experiment {self.name!r}")
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")


@dataclass
class ExperimentResult:
    name: str
    rows: list
    header: list
    verdict: dict
    csv_path: str

    @property
    def passed(self):
        return all(self.verdict.values())


def _write_csv(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
    return path


def run_experiment(spec, lab):
    fn = {
        "cfg_sweep": _exp_cfg_sweep,
        "data_scaling": _exp_data_scaling,
        "dpo_adaptation": _exp_dpo_adaptation,
        "ce_divergence": _exp_ce_divergence,
        "reflection_gain": _exp_reflection_gain,
    }[spec.name]
    return fn(spec, lab)


def _exp_cfg_sweep(spec, lab):
    seed = spec.seeds[0]
    scenes = lab.eval_scenes()
    model = lab.base_model()
    lams = tuple(spec.params.get("lams", lab.cfg.sweep_lams))
    per_lam = {}
    rows = []
    for lam in lams:
        vals = lab.eval_adherence(model, scenes, lam, seed)
        per_lam[lam] = vals
        rows.append([lam, float(vals.mean())])
    lo, hi = paired_bootstrap_ci(
        per_lam[3.0] - per_lam[1.0], lab.cfg.bootstrap_draws, seed
    )
    verdict = {
        "guided_beats_unguided": lo > 0.0,
        "tail_not_above_peak": float(per_lam[8.0].mean()) <= float(per_lam[3.0].mean()),
    }
    rows.append(["ci_low_3_vs_1", lo])
    rows.append(["ci_high_3_vs_1", hi])
    path = _write_csv(os.path.join(spec.out_dir, "cfg_sweep.csv"), ["lambda", "CL"], rows)
    return ExperimentResult("cfg_sweep", rows, ["lambda", "CL"], verdict, path)


def _scaled_run(lab, fraction, steps, seed):
    cfg = lab.cfg
    model = Model(cfg.model_config(), lab.vocab, seed=cfg.seed)
    datasets = lab.corpus(lab.train_scenes(), "train", fraction=fraction)
    stage = StageConfig(
        name=f"scale_{fraction}", total_steps=steps, peak_lr=cfg.pretrain_lr,
        schedule="cosine", warmup=min(cfg.pretrain_warmup, steps // 4),
        tokens_per_batch=cfg.pretrain_tokens, pack_budget=cfg.pack_budget,
        frozen=("encoder",), seed=seed,
    )
    rows = run_stage(model, datasets, stage, BlendSpec.pretraining_default())
    return model, datasets, rows


def _exp_data_scaling(spec, lab):
    seed = spec.seeds[0]
    steps = int(spec.params.get("steps", 400))
    fractions = tuple(spec.params.get("fractions", (1.0, 0.25, 1.0 / 32.0)))
    val = lab.corpus(lab.val_scenes(), "val")
    rows = []
    gaps = {}
    for frac in fractions:
        model, train_sets, _ = _scaled_run(lab, frac, steps, seed + 71)
        train_loss = lab.dataset_loss(model, {
            k: v[: min(len(v), 256)] for k, v in train_sets.items()
        })
        val_loss = lab.dataset_loss(model, val)
        gaps[frac] = val_loss - train_loss
        rows.append([frac, train_loss, val_loss, gaps[frac]])
    smallest = min(fractions)
    verdict = {
        "smallest_fraction_overfits_most": all(
            gaps[smallest] > gaps[f] for f in fractions if f != smallest
        ),
        "gap_exceeds_full_data": gaps[smallest] > gaps[max(fractions)],
    }
    header = ["fraction", "loss_train", "loss_val", "gap"]
    path = _write_csv(os.path.join(spec.out_dir, "data_scaling.csv"), header, rows)
    return ExperimentResult("data_scaling", rows, header, verdict, path)


def _exp_dpo_adaptation(spec, lab):
    lr = lab.cfg.dpo_ablation_lr
    steps = lab.cfg.dpo_ablation_steps
    _, with_rows = lab.dpo_run("dpo_ablate_adapted", start_from_adapted=True,
                               ce_weight=1.0, steps=steps, lr=lr)
    _, without_rows = lab.dpo_run("dpo_ablate_cold", start_from_adapted=False,
                                  ce_weight=1.0, steps=steps, lr=lr)
    early = max(1, len(with_rows) // 10)
    peak_with = max(r["dpo_loss"] for r in with_rows[:early])
    peak_without = max(r["dpo_loss"] for r in without_rows[:early])
    rows = [
        [r["step"], w["dpo_loss"], r["dpo_loss"]]
        for w, r in zip(with_rows, without_rows)
    ]
    rows.append(["early_peak_with", peak_with, peak_without])
    verdict = {"cold_start_spikes_20pct": peak_without >= 1.2 * peak_with}
    header = ["step", "dpo_loss_with_adapt", "dpo_loss_without"]
    path = _write_csv(os.path.join(spec.out_dir, "dpo_adaptation.csv"), header, rows)
    return ExperimentResult("dpo_adaptation", rows, header, verdict, path)


def _exp_ce_divergence(spec, lab):
    lr = lab.cfg.dpo_ablation_lr
    steps = lab.cfg.dpo_ablation_steps
    _, ce_rows = lab.dpo_run("dpo_ablate_adapted", start_from_adapted=True,
                             ce_weight=1.0, steps=steps, lr=lr)
    _, pure_rows = lab.dpo_run("dpo_ablate_pure", start_from_adapted=True,
                               ce_weight=0.0, steps=steps, lr=lr)
    div_ce = [r["divergence"] for r in ce_rows if "divergence" in r]
    div_pure = [r["divergence"] for r in pure_rows if "divergence" in r]
    rows = [[i + 1, a, b] for i, (a, b) in enumerate(zip(div_ce, div_pure))]
    verdict = {
        "ce_halves_divergence": abs(div_ce[-1]) <= 0.5 * abs(div_pure[-1]),
    }
    header = ["interval", "divergence_ce1", "divergence_ce0"]
    path = _write_csv(os.path.join(spec.out_dir, "ce_divergence.csv"), header, rows)
    return ExperimentResult("ce_divergence", rows, header, verdict, path)


def _exp_reflection_gain(spec, lab):
    first, second, failures = lab.reflection_eval()
    rows = [[i, a, b] for i, (a, b) in enumerate(zip(first, second))]
    if len(first):
        gain = float(second.mean() - first.mean())
        rows.append(["mean", float(first.mean()), float(second.mean())])
    else:
        gain = float("nan")
        rows.append(["mean", float("nan"), float("nan")])
    rows.append(["failures", failures, 0.0])
    verdict = {"second_pass_gains_002": len(first) > 0 and gain >= 0.02}
    header = ["prompt", "CL_first", "CL_second"]
    path = _write_csv(os.path.join(spec.out_dir, "reflection_gain.csv"), header, rows)
    return ExperimentResult("reflection_gain", rows, header, verdict, path)
