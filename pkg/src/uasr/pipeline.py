"""End-to-end orchestration: initialization, alternating segmentation-policy /
phoneme-predictor training, unsupervised model selection, stopping, resume.

Every stage derives its RNG from (seed, iteration, stage name) and reads its
inputs from persisted artifacts, so an interrupted run resumed at any stage
boundary reproduces the uninterrupted run bit for bit. Model selection and
stopping consult only the unsupervised metric; oracle transcripts are used
exclusively on the reporting path (training code receives utterance views with
oracle fields stripped).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversarial, metrics
from .adversarial import (
    Discriminator,
    GanTrainConfig,
    GanWeights,
    Generator,
    KMeansModel,
    PcaModel,
    apply_pca,
    fit_kmeans,
    fit_pca,
    kmeans_segment,
    train_gan,
)
from .corpus import (
    PhonemeInventory,
    SynthConfig,
    TextCorpus,
    Utterance,
    gen_synthetic_corpus,
    load_corpus,
    read_bit_lines,
    read_token_lines,
    save_corpus,
    write_bit_lines,
    write_token_lines,
)
from .lm import NGramLM, load_lm, save_lm, train_ngram
from .nnet import OptimConfig, ParamSet, load_checkpoint, save_checkpoint
from .segmenter import (
    RewardWeights,
    SegmentationPolicy,
    behavior_clone,
    compute_reward,
    dedup,
    infer_boundaries,
    mean_pool,
    merge_boundaries,
    normalize_rewards,
    policy_forward,
    reinforce_step,
    sample_boundaries,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad or inconsistent pipeline configuration (CLI exit code 2)."""


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    corpus_manifest: str | None = None  # use an existing corpus instead of synthesizing
    seed: int = 0
    max_iterations: int = 3

    # language model
    lm_order: int = 4
    lm_discount: float = 0.75

    # feature preprocessing
    pca_dim: int = 16
    kmeans_multiplier: float = 2.0  # k = multiplier * inventory size

    # adversarial training
    gan: GanWeights = field(default_factory=GanWeights)
    gen_kernel: int = 9
    disc_hidden: int = 64
    disc_kernels: tuple[int, int] = (3, 3)
    gan_init_steps: int = 8000
    gan_iter_steps: int = 2000
    gan_batch_size: int = 16
    gan_eval_interval: int = 250
    gen_lr: float = 5e-4
    disc_lr: float = 5e-4
    gan_weight_decay: float = 1e-4
    non_saturating: bool = True

    # segmentation policy
    policy_hidden: int = 64
    bc_epochs: int = 20
    bc_lr: float = 5e-3
    bc_class_weights: tuple[float, float] = (1.0, 5.0)
    bc_batch_size: int = 16
    bc_target_pre_pooling: bool = False  # iteration-1 BC target before adjacent pooling
    rl_epochs: int = 30
    rl_lr: float = 1e-4
    rl_weight_decay: float = 1e-4
    rl_batch_size: int = 128
    rewards: RewardWeights = field(default_factory=RewardWeights)
    merge_for_stage2: bool = True  # --no-merge ablation flag

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.pca_dim < 1:
            raise ConfigError("pca_dim must be positive")
        if self.gan_init_steps < 0 or self.gan_iter_steps < 0:
            raise ConfigError("GAN step counts must be >= 0")


_NESTED = {"synth": SynthConfig, "gan": GanWeights, "rewards": RewardWeights}
_TUPLE_FIELDS = {"disc_kernels", "bc_class_weights", "duration_range", "sentence_len_range", "word_break_range"}


def config_from_dict(data: dict) -> PipelineConfig:
    def build(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in _NESTED and isinstance(value, dict):
                value = build(_NESTED[key], value)
            elif key in _TUPLE_FIELDS and isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc

    return build(PipelineConfig, data)


def config_to_dict(config: PipelineConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def stage_rng(seed: int, iteration: int, stage: str) -> np.random.Generator:
    """Stage-local RNG, independent of how the run got here (resume safety)."""
    tag = int.from_bytes(stage.encode()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, iteration, tag]))


# ---------------------------------------------------------------------------
# run directory plumbing


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)
        for sub in ("checkpoints", "predictions", "boundaries", "reports", "logs"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def predictions(self, name: str) -> Path:
        return self.root / "predictions" / f"{name}.phn"

    def boundaries(self, name: str) -> Path:
        return self.root / "boundaries" / f"{name}.bnd"

    def log(self, name: str) -> Path:
        return self.root / "logs" / name

    @property
    def state_path(self) -> Path:
        return self.root / "state.json"


def log_event(paths: RunPaths, **payload):
    payload.setdefault("ts", time.time())
    with open(paths.log("events.jsonl"), "a") as fh:
        fh.write(json.dumps(payload) + "\n")


@dataclass
class PipelineState:
    completed: list[str] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)  # unsup metric per stage
    per: dict[str, float] = field(default_factory=dict)  # oracle PER, reporting only
    selected_iteration: int | None = None
    stopped_after: int | None = None

    def save(self, paths: RunPaths):
        paths.state_path.write_text(json.dumps(dataclasses.asdict(self), indent=2))

    @classmethod
    def load(cls, paths: RunPaths) -> "PipelineState":
        data = json.loads(paths.state_path.read_text())
        return cls(**data)


# ---------------------------------------------------------------------------
# working set: everything a stage needs, rebuildable from persisted artifacts


@dataclass
class WorkSet:
    config: PipelineConfig
    paths: RunPaths
    inventory: PhonemeInventory
    train: list[Utterance]  # full records: reporting only
    valid: list[Utterance]
    train_view: list[Utterance]  # oracle fields stripped: all training code
    valid_view: list[Utterance]
    text: TextCorpus
    lm: NGramLM
    pca: PcaModel | None = None
    kmeans: KMeansModel | None = None
    gen: Generator | None = None
    policy: SegmentationPolicy | None = None
    train_reduced: list[np.ndarray] | None = None  # PCA features per train utt
    valid_reduced: list[np.ndarray] | None = None
    prev_train_preds: list[np.ndarray] | None = None  # frozen Y' from last stage
    prev_valid_preds: list[np.ndarray] | None = None
    bc_bounds: list[np.ndarray] | None = None  # BC targets (frame-level bits, train)

    @property
    def frame_rate(self) -> float:
        return self.train[0].frame_rate_hz

    @property
    def tol_frames(self) -> int:
        return int(0.020 * self.frame_rate)  # 20 ms tolerance, rounded down


def prepare_corpus(config: PipelineConfig, paths: RunPaths) -> WorkSet:
    corpus_dir = paths.root / "corpus"
    if config.corpus_manifest:
        manifest = Path(config.corpus_manifest)
    else:
        manifest = corpus_dir / "manifest.json"
        if not manifest.exists():
            utts, text = gen_synthetic_corpus(config.synth)
            n_train = config.synth.n_speech_utts
            save_corpus({"train": utts[:n_train], "valid": utts[n_train:]}, text, corpus_dir)
    splits, text = load_corpus(manifest)
    if "train" not in splits or "valid" not in splits:
        raise ConfigError(f"manifest {manifest} must define 'train' and 'valid' splits")
    train, valid = splits["train"], splits["valid"]

    lm_path = paths.root / "lm.bin"
    if lm_path.exists():
        vlm = load_lm(lm_path)
    else:
        vlm = train_ngram(text, order=config.lm_order, discount=config.lm_discount)
        save_lm(vlm, lm_path)

    return WorkSet(
        config=config,
        paths=paths,
        inventory=text.inventory,
        train=train,
        valid=valid,
        train_view=[u.without_oracle() for u in train],
        valid_view=[u.without_oracle() for u in valid],
        text=text,
        lm=vlm,
    )


def _reduce_all(ws: WorkSet):
    ws.train_reduced = [apply_pca(ws.pca, u.features) for u in ws.train_view]
    ws.valid_reduced = [apply_pca(ws.pca, u.features) for u in ws.valid_view]


def _report_per(ws: WorkSet, preds: list[np.ndarray]) -> float:
    refs = [dedup(u.oracle_phonemes) for u in ws.valid]
    return metrics.per(refs, preds).rate


def _save_preproc(ws: WorkSet):
    arrays = {
        "pca.mean": ws.pca.mean,
        "pca.components": ws.pca.components,
        "pca.explained": ws.pca.explained,
        "kmeans.centroids": ws.kmeans.centroids,
        "kmeans.inertia": np.array([ws.kmeans.inertia]),
    }
    save_checkpoint(ws.paths.checkpoint("preproc"), arrays)


def _load_preproc(ws: WorkSet):
    arrays, _, _ = load_checkpoint(ws.paths.checkpoint("preproc"))
    ws.pca = PcaModel(arrays["pca.mean"], arrays["pca.components"], arrays["pca.explained"])
    ws.kmeans = KMeansModel(arrays["kmeans.centroids"], float(arrays["kmeans.inertia"][0]))
    _reduce_all(ws)


def _new_generator(ws: WorkSet, rng) -> Generator:
    return Generator(ws.config.pca_dim, ws.inventory.size, ws.config.gen_kernel, rng=rng)


def _new_discriminator(ws: WorkSet, rng) -> Discriminator:
    return Discriminator(ws.inventory.size, ws.config.disc_hidden, ws.config.disc_kernels, rng=rng)


def _gan_cfg(config: PipelineConfig, steps: int) -> GanTrainConfig:
    return GanTrainConfig(
        steps=steps,
        batch_size=config.gan_batch_size,
        eval_interval=config.gan_eval_interval,
        gen_lr=config.gen_lr,
        disc_lr=config.disc_lr,
        weight_decay=config.gan_weight_decay,
        non_saturating=config.non_saturating,
    )


# ---------------------------------------------------------------------------
# stages


def run_init(ws: WorkSet) -> dict:
    """wav2vec-U-style initialization: PCA -> k-means segmentation -> adjacent
    pooling -> adversarial training; exports initial predictions and boundaries."""
    config = ws.config
    rng = stage_rng(config.seed, 0, "init")
    pool = np.concatenate([u.features for u in ws.train_view], axis=0)
    ws.pca = fit_pca(pool, config.pca_dim)
    reduced_pool = apply_pca(ws.pca, pool)
    k = int(round(config.kmeans_multiplier * ws.inventory.size))
    ws.kmeans = fit_kmeans(reduced_pool, k, rng)
    _reduce_all(ws)

    train_segs, train_bounds = _init_segments(ws, ws.train_reduced)
    valid_segs, valid_bounds = _init_segments(ws, ws.valid_reduced)

    gen = _new_generator(ws, rng)
    disc = _new_discriminator(ws, rng)
    result = train_gan(
        gen,
        disc,
        train_segs,
        valid_segs,
        ws.text.sentences,
        ws.lm,
        config.gan,
        _gan_cfg(config, config.gan_init_steps),
        rng,
        loss_csv=ws.paths.log("init_gan.csv"),
    )
    ws.gen = gen

    train_preds = adversarial.generator_predictions(gen, train_segs)
    valid_preds = adversarial.generator_predictions(gen, valid_segs)
    ws.prev_train_preds = train_preds
    ws.prev_valid_preds = valid_preds
    if config.bc_target_pre_pooling:
        ws.bc_bounds = [kmeans_segment(ws.kmeans, red) for red in ws.train_reduced]
    else:
        ws.bc_bounds = train_bounds

    save_checkpoint(ws.paths.checkpoint("init_gen"), gen.parameters(), step=result.best_step, rng=rng)
    _save_preproc(ws)
    write_token_lines(ws.paths.predictions("init_train"), train_preds, ws.inventory)
    write_token_lines(ws.paths.predictions("init_valid"), valid_preds, ws.inventory)
    write_bit_lines(ws.paths.boundaries("init_train"), train_bounds)
    write_bit_lines(ws.paths.boundaries("init_valid"), valid_bounds)
    return {"metric": result.best_metric, "per": _report_per(ws, valid_preds), "best_step": result.best_step}


def _init_segments(ws: WorkSet, reduced_list):
    segs, bounds = [], []
    for red in reduced_list:
        bits = kmeans_segment(ws.kmeans, red)
        pooled = adversarial.adjacent_pool(mean_pool(red, bits))
        segs.append(pooled)
        bounds.append(adversarial.adjacent_pool_boundary(bits))
    return segs, bounds


def _policy_valid_predictions(ws: WorkSet, policy: SegmentationPolicy):
    preds, bound_list = [], []
    for u, red in zip(ws.valid_view, ws.valid_reduced):
        bits = infer_boundaries(policy_forward(policy, u.features))
        segs = mean_pool(red, bits)
        preds.append(dedup(ws.gen.predict_ids(segs)))
        bound_list.append(bits)
    return preds, bound_list


def run_stage1(ws: WorkSet, iteration: int) -> dict:
    """Behavior cloning on the previous boundaries, then REINFORCE; the best
    policy by the unsupervised validation metric wins (post-BC state included)."""
    config = ws.config
    rng = stage_rng(config.seed, iteration, "stage1")
    feat_dim = ws.train_view[0].features.shape[1]
    policy = SegmentationPolicy(feat_dim, config.policy_hidden, rng=rng)
    pset = ParamSet(policy.parameters())

    bc_data = list(zip([u.features for u in ws.train_view], ws.bc_bounds))
    behavior_clone(
        policy,
        bc_data,
        config.bc_epochs,
        pset,
        OptimConfig(learning_rate=config.bc_lr),
        rng,
        class_weights=config.bc_class_weights,
        batch_size=config.bc_batch_size,
    )

    valid_preds, _ = _policy_valid_predictions(ws, policy)
    best_metric = metrics.unsup_metric(valid_preds, ws.lm)
    best_arrays = {k: v.copy() for k, v in policy.parameters().items()}
    best_epoch = 0

    # frozen previous-iteration predictions and perplexities: one scoring pass
    prev_preds = ws.prev_train_preds
    n_train = len(ws.train_view)
    batches_per_epoch = max(1, (n_train + config.rl_batch_size - 1) // config.rl_batch_size)
    rl_pset = ParamSet(policy.parameters())
    rl_optim = OptimConfig(
        learning_rate=config.rl_lr,
        weight_decay=config.rl_weight_decay,
        schedule="cosine",
        total_steps=max(1, config.rl_epochs * batches_per_epoch),
    )
    reward_log = open(ws.paths.log(f"iter{iteration}_rewards.jsonl"), "w")
    try:
        for epoch in range(1, config.rl_epochs + 1):
            order = rng.permutation(n_train)
            for start in range(0, n_train, config.rl_batch_size):
                chunk = order[start:start + config.rl_batch_size]
                samples, breakdowns = [], []
                for i in chunk:
                    u = ws.train_view[i]
                    probs = policy_forward(policy, u.features)
                    bits = sample_boundaries(probs, rng)
                    segs = mean_pool(ws.train_reduced[i], bits)
                    y_cur = dedup(ws.gen.predict_ids(segs))
                    breakdowns.append(compute_reward(y_cur, prev_preds[i], ws.lm))
                    samples.append((u.features, bits))
                totals = normalize_rewards(breakdowns, config.rewards)
                batch = [(f, b, r) for (f, b), r in zip(samples, totals)]
                reinforce_step(policy, batch, rl_pset, rl_optim)
                for i, bd in zip(chunk, breakdowns):
                    reward_log.write(
                        json.dumps(
                            {
                                "utt": ws.train_view[i].id,
                                "epoch": epoch,
                                "r_ppl": bd.r_ppl,
                                "r_edit": bd.r_edit,
                                "r_len": bd.r_len,
                                "r_total": bd.r_total,
                                "ppl_cur": bd.ppl_cur,
                                "ppl_prev": bd.ppl_prev,
                            }
                        )
                        + "\n"
                    )
            valid_preds, _ = _policy_valid_predictions(ws, policy)
            metric = metrics.unsup_metric(valid_preds, ws.lm)
            if metric < best_metric:
                best_metric = metric
                best_arrays = {k: v.copy() for k, v in policy.parameters().items()}
                best_epoch = epoch
    finally:
        reward_log.close()
    policy.load_parameters(best_arrays)
    ws.policy = policy

    # export inference boundaries, merged boundaries, and predictions
    train_bits, merged_bits, train_preds = [], [], []
    for u, red in zip(ws.train_view, ws.train_reduced):
        bits = infer_boundaries(policy_forward(policy, u.features))
        seg_pred = ws.gen.predict_ids(mean_pool(red, bits))
        train_bits.append(bits)
        merged_bits.append(merge_boundaries(bits, seg_pred))
        train_preds.append(dedup(seg_pred))
    valid_preds, valid_bits = _policy_valid_predictions(ws, policy)
    merged_valid = []
    for red, bits in zip(ws.valid_reduced, valid_bits):
        seg_pred = ws.gen.predict_ids(mean_pool(red, bits))
        merged_valid.append(merge_boundaries(bits, seg_pred))

    ws.bc_bounds = merged_bits  # next iteration's BC target
    save_checkpoint(ws.paths.checkpoint(f"iter{iteration}_policy"), policy.parameters(), step=best_epoch, rng=rng)
    write_bit_lines(ws.paths.boundaries(f"iter{iteration}_policy_train"), train_bits)
    write_bit_lines(ws.paths.boundaries(f"iter{iteration}_policy_valid"), valid_bits)
    write_bit_lines(ws.paths.boundaries(f"iter{iteration}_merged_train"), merged_bits)
    write_bit_lines(ws.paths.boundaries(f"iter{iteration}_merged_valid"), merged_valid)
    write_token_lines(ws.paths.predictions(f"iter{iteration}_stage1_train"), train_preds, ws.inventory)
    write_token_lines(ws.paths.predictions(f"iter{iteration}_stage1_valid"), valid_preds, ws.inventory)
    return {"metric": best_metric, "per": _report_per(ws, valid_preds), "best_epoch": best_epoch}


def run_stage2(ws: WorkSet, iteration: int) -> dict:
    """Adversarial refinement of the phoneme predictor on (merged) stage-1
    boundaries; generator warm-started from the previous iteration."""
    config = ws.config
    rng = stage_rng(config.seed, iteration, "stage2")
    kind = "merged" if config.merge_for_stage2 else "policy"
    train_bounds = read_bit_lines(ws.paths.boundaries(f"iter{iteration}_{kind}_train"))
    valid_bounds = read_bit_lines(ws.paths.boundaries(f"iter{iteration}_{kind}_valid"))
    train_segs = [mean_pool(red, bits) for red, bits in zip(ws.train_reduced, train_bounds)]
    valid_segs = [mean_pool(red, bits) for red, bits in zip(ws.valid_reduced, valid_bounds)]

    disc = _new_discriminator(ws, rng)
    result = train_gan(
        ws.gen,
        disc,
        train_segs,
        valid_segs,
        ws.text.sentences,
        ws.lm,
        config.gan,
        _gan_cfg(config, config.gan_iter_steps),
        rng,
        loss_csv=ws.paths.log(f"iter{iteration}_stage2_gan.csv"),
    )

    train_preds = adversarial.generator_predictions(ws.gen, train_segs)
    valid_preds = adversarial.generator_predictions(ws.gen, valid_segs)
    ws.prev_train_preds = train_preds
    ws.prev_valid_preds = valid_preds

    save_checkpoint(ws.paths.checkpoint(f"iter{iteration}_gen"), ws.gen.parameters(), step=result.best_step, rng=rng)
    write_token_lines(ws.paths.predictions(f"iter{iteration}_stage2_train"), train_preds, ws.inventory)
    write_token_lines(ws.paths.predictions(f"iter{iteration}_stage2_valid"), valid_preds, ws.inventory)
    return {"metric": result.best_metric, "per": _report_per(ws, valid_preds), "best_step": result.best_step}


# ---------------------------------------------------------------------------
# resume plumbing


def _restore_after(ws: WorkSet, state: PipelineState):
    """Rebuild the in-memory working set from the last completed stage's files."""
    if "init" not in state.completed:
        return
    _load_preproc(ws)
    inv = ws.inventory
    last_gen = "init_gen"
    preds_prefix = "init"
    last_s1 = 0
    for key in state.completed:
        if key.startswith("iter") and key.endswith(".stage1"):
            last_s1 = max(last_s1, int(key[4:].split(".")[0]))
        if key.startswith("iter") and key.endswith(".stage2"):
            i = int(key[4:].split(".")[0])
            last_gen = f"iter{i}_gen"
            preds_prefix = f"iter{i}_stage2"
    if last_s1:
        ws.bc_bounds = read_bit_lines(ws.paths.boundaries(f"iter{last_s1}_merged_train"))
        arrays, _, _ = load_checkpoint(ws.paths.checkpoint(f"iter{last_s1}_policy"))
        feat_dim = ws.train_view[0].features.shape[1]
        ws.policy = SegmentationPolicy(feat_dim, ws.config.policy_hidden)
        ws.policy.load_parameters(arrays)
    elif ws.config.bc_target_pre_pooling:
        ws.bc_bounds = [kmeans_segment(ws.kmeans, red) for red in ws.train_reduced]
    else:
        ws.bc_bounds = read_bit_lines(ws.paths.boundaries("init_train"))
    arrays, _, _ = load_checkpoint(ws.paths.checkpoint(last_gen))
    gen = Generator(ws.config.pca_dim, inv.size, ws.config.gen_kernel)
    gen.load_parameters(arrays)
    ws.gen = gen
    ws.prev_train_preds = read_token_lines(ws.paths.predictions(f"{preds_prefix}_train"), inv)
    ws.prev_valid_preds = read_token_lines(ws.paths.predictions(f"{preds_prefix}_valid"), inv)


# ---------------------------------------------------------------------------
# full loop


def run_iterations(
    config: PipelineConfig,
    run_dir,
    resume: bool = False,
    stop_after: str | None = None,
) -> PipelineState:
    """Init, then alternate stages until the per-iteration validation metric
    stops improving or max_iterations is hit. Returns the final state; a full
    report lands in reports/report.json."""
    paths = RunPaths(Path(run_dir))
    (paths.root / "config.json").write_text(json.dumps(config_to_dict(config), indent=2))
    state = PipelineState.load(paths) if (resume and paths.state_path.exists()) else PipelineState()
    ws = prepare_corpus(config, paths)
    _restore_after(ws, state)

    def finish(stage_key: str, info: dict) -> None:
        state.completed.append(stage_key)
        state.metrics[stage_key] = info["metric"]
        state.per[stage_key] = info["per"]
        state.save(paths)
        log_event(paths, stage=stage_key, **info)

    if "init" not in state.completed:
        finish("init", run_init(ws))
        if stop_after == "init":
            return state

    prev_iter_metric = state.metrics["init"]
    for iteration in range(1, config.max_iterations + 1):
        if f"iter{iteration}.stage2" in state.completed:
            prev_iter_metric = state.metrics[f"iter{iteration}.stage2"]
            continue
        if state.stopped_after is not None:
            break
        if f"iter{iteration}.stage1" not in state.completed:
            finish(f"iter{iteration}.stage1", run_stage1(ws, iteration))
            if stop_after == f"iter{iteration}.stage1":
                return state
        finish(f"iter{iteration}.stage2", run_stage2(ws, iteration))
        metric = state.metrics[f"iter{iteration}.stage2"]
        if stop_after == f"iter{iteration}.stage2":
            return state
        if metric >= prev_iter_metric:
            state.stopped_after = iteration
            state.save(paths)
            log_event(paths, stage="stopping", iteration=iteration, metric=metric, previous=prev_iter_metric)
            break
        prev_iter_metric = metric

    _select_and_report(ws, state)
    return state


def _iteration_metric_key(i: int) -> str:
    return "init" if i == 0 else f"iter{i}.stage2"


def _select_and_report(ws: WorkSet, state: PipelineState):
    done = [0] + sorted(
        int(k[4:].split(".")[0]) for k in state.completed if k.endswith(".stage2")
    )
    state.selected_iteration = min(done, key=lambda i: state.metrics[_iteration_metric_key(i)])
    state.save(ws.paths)

    report = {
        "selected_iteration": state.selected_iteration,
        "stopped_after": state.stopped_after,
        "stages": {},
    }
    oracle_bounds = [u.oracle_boundaries for u in ws.valid]
    for key in state.completed:
        entry = {"unsup_metric": state.metrics[key], "per_valid": state.per[key]}
        bound_name = None
        if key == "init":
            bound_name = "init_valid"
        elif key.endswith(".stage1"):
            i = key[4:].split(".")[0]
            bound_name = f"iter{i}_policy_valid"
        elif key.endswith(".stage2"):
            i = key[4:].split(".")[0]
            bound_name = f"iter{i}_merged_valid" if ws.config.merge_for_stage2 else f"iter{i}_policy_valid"
        if bound_name and ws.paths.boundaries(bound_name).exists():
            hyp = read_bit_lines(ws.paths.boundaries(bound_name))
            score = metrics.boundary_prf_corpus(oracle_bounds, hyp, ws.tol_frames, "harsh")
            entry["boundaries"] = metrics.score_report(score)
            total_frames = sum(len(b) for b in hyp)
            entry["seg_frequency_hz"] = sum(int(b.sum()) for b in hyp) * ws.frame_rate / total_frames
        report["stages"][key] = entry
    (ws.paths.root / "reports" / "report.json").write_text(json.dumps(report, indent=2))
