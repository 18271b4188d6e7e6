"""End-to-end orchestration: dataset generation, two-stage training,
refinement of coarse inputs, and evaluation reports.

Everything is driven by a single RunConfig (JSON on disk); every command
writes its resolved config next to its outputs, and all randomness is
derived from (seed, step) pairs so runs and resumes are bit-reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import flow as flow_mod
from . import vae as vae_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .dit import DiTConfig, DiTParams, condition_tokens, init_dit, velocity_fn
from .flow import FlowHyper, LatentPair, NoiseSchedule
from .geometry import (BoxTransform, PointCloud, ShapeSpec, condition_vector,
                       make_sdf, normalize_to_unit_box, random_spec,
                       sample_surface)
from .meshing import (DEFAULT_BOUNDS, TriMesh, build_sdf_grid,
                      chamfer_distance, export_obj, load_obj,
                      marching_cubes, sample_mesh_surface, sdf_mae)
from .nn import load_parameters, named_parameters, parameter_list
from .optim import AdamState, adam_init, adam_step, zero_grads
from .sampling import (QuerySet, TokenMatching, duplicate_fraction,
                       match_tokens, two_stage_downsample)
from .tensor import Tape, Tensor, backward
from .vae import VaeConfig, VaeParams, decode, encode, init_vae, vae_loss


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    num_shapes: int = 80
    bases: list = field(default_factory=lambda: ["sphere"])
    radius_range: list = field(default_factory=lambda: [0.3, 0.42])
    num_detail_range: list = field(default_factory=lambda: [1, 3])
    freq_range: list = field(default_factory=lambda: [1, 6])
    amp_range: list = field(default_factory=lambda: [0.02, 0.08])
    noise_amp: float = 0.015
    detail_attenuation: float = 0.0
    num_surface_points: int = 2048               # N
    num_latent_tokens: int = 32                  # M
    max_condition_terms: int = 4
    holdout_fraction: float = 0.2
    seed: int = 0


@dataclass
class VaeTrainConfig:
    width: int = 64
    latent_width: int = 64
    num_heads: int = 4
    decoder_blocks: int = 2
    num_frequencies: int = 6
    beta_kl: float = 1e-6
    lr: float = 1e-3
    warmup_steps: int = 100
    steps: int = 4000
    batch_positions: int = 256
    near_surface_sigma: float = 0.02
    log_every: int = 50
    seed: int = 0


@dataclass
class FlowTrainConfig:
    num_blocks: int = 4
    width: int = 64
    num_heads: int = 4
    cond_width: int = 16
    num_cond_tokens: int = 4
    sigma_min: float = 1e-5
    t_aug_train: int = 400
    t_aug_infer: int = 100
    num_steps: int = 25
    cfg_scale: float = 2.0
    cond_dropout: float = 0.1
    token_matching: bool = True
    lr: float = 1e-3
    warmup_steps: int = 100
    steps: int = 3000
    batch_size: int = 8
    log_every: int = 50
    seed: int = 0

    def dit_config(self, latent_len: int, latent_width: int) -> DiTConfig:
        return DiTConfig(num_blocks=self.num_blocks, width=self.width,
                         num_heads=self.num_heads, latent_len=latent_len,
                         cond_width=self.cond_width,
                         latent_width=latent_width)

    def hyper(self) -> FlowHyper:
        return FlowHyper(sigma_min=self.sigma_min,
                         t_aug_train=self.t_aug_train,
                         t_aug_infer=self.t_aug_infer,
                         num_steps=self.num_steps,
                         cfg_scale=self.cfg_scale,
                         cond_dropout=self.cond_dropout)


@dataclass
class EvalConfig:
    grid_resolution: int = 48
    metric_samples: int = 4096
    use_noise_aug: bool = False
    cfg_scale: Optional[float] = None   # None: use the flow config value
    seed: int = 0


@dataclass
class PathsConfig:
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    out_dir: str = "runs/out"


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vae: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    flow: FlowTrainConfig = field(default_factory=FlowTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        d = self.dataset
        if d.num_surface_points < 4 * d.num_latent_tokens:
            raise ConfigError(
                "dataset.num_surface_points: must be >= 4 * "
                f"num_latent_tokens ({d.num_surface_points} < "
                f"{4 * d.num_latent_tokens})")
        if not 0.0 <= d.holdout_fraction < 1.0:
            raise ConfigError("dataset.holdout_fraction: must lie in [0, 1)")
        if d.num_detail_range[1] > d.max_condition_terms:
            raise ConfigError(
                "dataset.num_detail_range: upper bound exceeds "
                "max_condition_terms")
        if self.vae.width % self.vae.num_heads:
            raise ConfigError("vae.width: not divisible by vae.num_heads")
        if self.flow.width % self.flow.num_heads:
            raise ConfigError("flow.width: not divisible by flow.num_heads")
        for key, value in (("flow.steps", self.flow.steps),
                           ("vae.steps", self.vae.steps),
                           ("eval.grid_resolution", self.eval.grid_resolution)):
            if value < 1:
                raise ConfigError(f"{key}: must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        where = f"{path}.{name}" if path else name
        if f.type in (int, "int"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected int, got {value!r}")
        elif f.type in (float, "float"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected number, got {value!r}")
            value = float(value)
        elif f.type in (bool, "bool"):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected bool, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {"dataset": DatasetConfig, "vae": VaeTrainConfig,
             "flow": FlowTrainConfig, "eval": EvalConfig, "paths": PathsConfig}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
    cfg = RunConfig(**{name: _from_dict(cls, data[name], name)
                       for name, cls in _SECTIONS.items() if name in data})
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def write_resolved_config(config: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetEntry:
    entry_id: int
    fine_spec: ShapeSpec
    coarse_spec: ShapeSpec
    transform: BoxTransform
    fine_cloud: PointCloud       # normalized, shared frame with coarse
    coarse_cloud: PointCloud
    fine_queries: QuerySet
    matching: TokenMatching
    condition: np.ndarray
    dup_fraction: float


def _entry_seeds(base_seed: int, entry_id: int, n: int = 8) -> list[int]:
    return [int(s) for s in
            np.random.SeedSequence([base_seed, entry_id]).generate_state(n)]


def generate_entry(config: DatasetConfig, entry_id: int) -> DatasetEntry:
    seeds = _entry_seeds(config.seed, entry_id)
    rng = np.random.default_rng(seeds[0])
    base = config.bases[int(rng.integers(len(config.bases)))]
    fine_spec = random_spec(
        rng, base=base,
        radius_range=tuple(config.radius_range),
        num_detail_range=tuple(config.num_detail_range),
        freq_range=tuple(config.freq_range),
        amp_range=tuple(config.amp_range),
        seed=entry_id)
    coarse_spec = degrade_spec(fine_spec, config, seeds[1])

    fine_raw = sample_surface(fine_spec, config.num_surface_points, seed=seeds[2])
    coarse_raw = sample_surface(coarse_spec, config.num_surface_points, seed=seeds[3])

    # joint normalization keeps the pair aligned in one unit box
    both = PointCloud(np.concatenate([fine_raw.points, coarse_raw.points]))
    _, transform = normalize_to_unit_box(both)
    fine_cloud = PointCloud(transform.apply(fine_raw.points))
    coarse_cloud = PointCloud(transform.apply(coarse_raw.points))

    fine_queries = two_stage_downsample(
        fine_cloud, config.num_latent_tokens, seed=seeds[4])
    matching = match_tokens(fine_queries, coarse_cloud)
    return DatasetEntry(
        entry_id=entry_id,
        fine_spec=fine_spec,
        coarse_spec=coarse_spec,
        transform=transform,
        fine_cloud=fine_cloud,
        coarse_cloud=coarse_cloud,
        fine_queries=fine_queries,
        matching=matching,
        condition=condition_vector(fine_spec, config.max_condition_terms),
        dup_fraction=duplicate_fraction(matching),
    )


def degrade_spec(fine_spec: ShapeSpec, config: DatasetConfig,
                 seed: int) -> ShapeSpec:
    from .geometry import degrade
    return degrade(fine_spec, config.noise_amp, seed=seed,
                   detail_attenuation=config.detail_attenuation)


def _split_ids(ids: list[int], holdout_fraction: float) -> tuple[list, list]:
    if holdout_fraction <= 0:
        return list(ids), []
    stride = max(2, round(1.0 / holdout_fraction))
    holdout = [i for k, i in enumerate(ids) if k % stride == stride - 1]
    train = [i for i in ids if i not in holdout]
    return train, holdout


def gen_dataset(config: RunConfig, data_dir=None) -> dict:
    """Write all entries plus a manifest; returns the manifest dict."""
    config.validate()
    data_dir = Path(data_dir if data_dir is not None else config.paths.data_dir)
    entries_dir = data_dir / "entries"
    entries_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, data_dir)

    d = config.dataset
    records = []
    for entry_id in range(d.num_shapes):
        entry = generate_entry(d, entry_id)
        stem = f"{entry_id:04d}"
        np.save(entries_dir / f"{stem}_fine.npy", entry.fine_cloud.points)
        np.save(entries_dir / f"{stem}_coarse.npy", entry.coarse_cloud.points)
        with open(entries_dir / f"{stem}.json", "w") as f:
            json.dump({
                "id": entry_id,
                "fine_spec": entry.fine_spec.to_json_dict(),
                "coarse_spec": entry.coarse_spec.to_json_dict(),
                "transform": {"scale": entry.transform.scale,
                              "translation": entry.transform.translation.tolist()},
                "condition": entry.condition.tolist(),
                "fine_query_indices": entry.fine_queries.indices.tolist(),
                "matching": entry.matching.mapping.tolist(),
                "duplicate_fraction": entry.dup_fraction,
            }, f, indent=2)
        records.append({"id": entry_id,
                        "duplicate_fraction": entry.dup_fraction})

    ids = [r["id"] for r in records]
    train_ids, holdout_ids = _split_ids(ids, d.holdout_fraction)
    manifest = {
        "num_entries": d.num_shapes,
        "num_surface_points": d.num_surface_points,
        "num_latent_tokens": d.num_latent_tokens,
        "seed": d.seed,
        "entries": records,
        "train_ids": train_ids,
        "holdout_ids": holdout_ids,
        "mean_duplicate_fraction":
            float(np.mean([r["duplicate_fraction"] for r in records]))
            if records else 0.0,
    }
    with open(data_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "manifest.json") as f:
        return json.load(f)


def load_entry(data_dir, entry_id: int) -> DatasetEntry:
    entries_dir = Path(data_dir) / "entries"
    stem = f"{entry_id:04d}"
    with open(entries_dir / f"{stem}.json") as f:
        meta = json.load(f)
    fine_cloud = PointCloud(np.load(entries_dir / f"{stem}_fine.npy"))
    coarse_cloud = PointCloud(np.load(entries_dir / f"{stem}_coarse.npy"))
    fine_idx = np.asarray(meta["fine_query_indices"], dtype=np.int64)
    mapping = np.asarray(meta["matching"], dtype=np.int64)
    fine_queries = QuerySet(points=fine_cloud.points[fine_idx], indices=fine_idx)
    matching = TokenMatching(
        fine_queries=fine_queries,
        coarse_queries=QuerySet(points=coarse_cloud.points[mapping],
                                indices=mapping),
        mapping=mapping)
    return DatasetEntry(
        entry_id=meta["id"],
        fine_spec=ShapeSpec.from_json_dict(meta["fine_spec"]),
        coarse_spec=ShapeSpec.from_json_dict(meta["coarse_spec"]),
        transform=BoxTransform(
            scale=float(meta["transform"]["scale"]),
            translation=np.asarray(meta["transform"]["translation"])),
        fine_cloud=fine_cloud,
        coarse_cloud=coarse_cloud,
        fine_queries=fine_queries,
        matching=matching,
        condition=np.asarray(meta["condition"]),
        dup_fraction=float(meta["duplicate_fraction"]),
    )


def verify_dataset(data_dir) -> list[str]:
    """Check every entry against the dataset invariants; [] means clean."""
    problems: list[str] = []
    manifest = load_manifest(data_dir)
    box_tol = 1e-9
    for entry_id in [r["id"] for r in manifest["entries"]]:
        e = load_entry(data_dir, entry_id)
        tag = f"entry {entry_id}"
        both = np.concatenate([e.fine_cloud.points, e.coarse_cloud.points])
        if np.abs(both).max() > 0.5 + box_tol:
            problems.append(f"{tag}: points outside the unit box")
        extent = both.max(axis=0) - both.min(axis=0)
        if abs(extent.max() - 1.0) > 1e-6:
            problems.append(f"{tag}: joint AABB longest side != 1")
        if len(e.fine_queries) != manifest["num_latent_tokens"]:
            problems.append(f"{tag}: wrong query count")
        if not np.array_equal(e.fine_cloud.points[e.fine_queries.indices],
                              e.fine_queries.points):
            problems.append(f"{tag}: fine query indices do not match points")
        if not np.array_equal(e.coarse_cloud.points[e.matching.mapping],
                              e.matching.coarse_queries.points):
            problems.append(f"{tag}: matching does not index the coarse cloud")
        if len(e.matching.mapping) != len(e.fine_queries):
            problems.append(f"{tag}: matching length != query count")
        for spec in (e.fine_spec, e.coarse_spec):
            if any(abs(t.amp) > 0.1 + 1e-12 for t in spec.detail):
                problems.append(f"{tag}: detail amplitude exceeds 0.1")
    if manifest["num_surface_points"] < 4 * manifest["num_latent_tokens"]:
        problems.append("manifest: N < 4M")
    return problems


# ---------------------------------------------------------------------------
# checkpoint bundles


def _save_training_state(path, params, opt_state: AdamState, step: int,
                         sidecar: dict):
    arrays = {name: t.data for name, t in named_parameters(params)}
    names = list(arrays.keys())
    for name, m, v in zip(names, opt_state.m, opt_state.v):
        arrays[f"adam.m.{name}"] = m
        arrays[f"adam.v.{name}"] = v
    arrays["meta.step"] = np.array([float(step)])
    arrays["meta.adam_step"] = np.array([float(opt_state.step)])
    save_checkpoint(path, arrays)
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def _load_training_state(path, params, lr: float) -> tuple[AdamState, int]:
    arrays = load_checkpoint(path)
    load_parameters(params, {k: v for k, v in arrays.items()
                             if not k.startswith(("adam.", "meta."))})
    tensors = parameter_list(params)
    state = adam_init(tensors, lr=lr)
    names = [n for n, _ in named_parameters(params)]
    state.m = [arrays[f"adam.m.{n}"].copy() for n in names]
    state.v = [arrays[f"adam.v.{n}"].copy() for n in names]
    state.step = int(arrays["meta.adam_step"][0])
    return state, int(arrays["meta.step"][0])


def _sidecar(path) -> dict:
    with open(str(path) + ".json") as f:
        return json.load(f)


@dataclass
class VaeBundle:
    params: VaeParams
    config: VaeConfig
    num_latent_tokens: int
    num_surface_points: int


def load_vae_bundle(ckpt_path) -> VaeBundle:
    side = _sidecar(ckpt_path)
    config = _from_dict(VaeConfig, side["vae_config"], "vae_config")
    params = init_vae(config, seed=0)
    arrays = load_checkpoint(ckpt_path)
    load_parameters(params, {k: v for k, v in arrays.items()
                             if not k.startswith(("adam.", "meta."))})
    return VaeBundle(params=params, config=config,
                     num_latent_tokens=side["num_latent_tokens"],
                     num_surface_points=side["num_surface_points"])


@dataclass
class FlowBundle:
    params: DiTParams
    hyper: FlowHyper
    schedule: NoiseSchedule
    cond_param_len: int


def load_flow_bundle(ckpt_path) -> FlowBundle:
    side = _sidecar(ckpt_path)
    dit_config = _from_dict(DiTConfig, side["dit_config"], "dit_config")
    params = init_dit(dit_config,
                      cond_param_len=side["cond_param_len"],
                      num_cond_tokens=side["num_cond_tokens"], seed=0)
    arrays = load_checkpoint(ckpt_path)
    load_parameters(params, {k: v for k, v in arrays.items()
                             if not k.startswith(("adam.", "meta."))})
    hyper = _from_dict(FlowHyper, side["hyper"], "hyper")
    return FlowBundle(params=params, hyper=hyper,
                      schedule=NoiseSchedule(),
                      cond_param_len=side["cond_param_len"])


# ---------------------------------------------------------------------------
# VAE training


def _train_shapes(config: RunConfig, data_dir) -> list[tuple]:
    """(sdf_fn, cloud) for every fine and coarse train-split shape."""
    manifest = load_manifest(data_dir)
    shapes = []
    for entry_id in manifest["train_ids"]:
        e = load_entry(data_dir, entry_id)
        shapes.append((make_sdf(e.fine_spec, e.transform), e.fine_cloud))
        shapes.append((make_sdf(e.coarse_spec, e.transform), e.coarse_cloud))
    return shapes


def _step_seed(base_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([base_seed, step]).generate_state(1)[0])


def _training_positions(rng, cloud: PointCloud, sdf_fn, count: int,
                        sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Half near-surface (cloud points plus Gaussian offsets), half uniform."""
    near_n = count // 2
    picks = cloud.points[rng.integers(0, len(cloud), near_n)]
    near = picks + rng.normal(0.0, sigma, size=(near_n, 3))
    lo, hi = DEFAULT_BOUNDS
    unif = rng.uniform(lo, hi, size=(count - near_n, 3))
    pts = np.concatenate([near, unif])
    return pts, sdf_fn(pts)


def near_surface_mae(vae: VaeBundle, cloud: PointCloud, sdf_fn,
                     seed: int = 0, count: int = 1024) -> float:
    """MAE of the decoded field against the oracle in the near-surface band."""
    rng = np.random.default_rng(seed)
    queries = two_stage_downsample(cloud, vae.num_latent_tokens, seed=seed)
    latent = encode(cloud, queries, vae.params)
    pts = cloud.points[rng.integers(0, len(cloud), count)] \
        + rng.normal(0.0, 0.02, size=(count, 3))
    pred = decode(latent, pts, vae.params).data
    return float(np.abs(pred - sdf_fn(pts)).mean())


def train_vae(config: RunConfig, data_dir=None, out_dir=None,
              resume=None) -> Path:
    """Adam training of the autoencoder on SDF regression; writes a
    checkpoint, a loss-curve CSV, and the resolved config."""
    config.validate()
    data_dir = Path(data_dir if data_dir is not None else config.paths.data_dir)
    out_dir = Path(out_dir if out_dir is not None else config.paths.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)

    shapes = _train_shapes(config, data_dir)
    if not shapes:
        raise ValueError("dataset has no training shapes")
    tc = config.vae
    vcfg = VaeConfig(width=tc.width, latent_width=tc.latent_width,
                     num_heads=tc.num_heads, decoder_blocks=tc.decoder_blocks,
                     num_frequencies=tc.num_frequencies)
    params = init_vae(vcfg, seed=tc.seed)
    tensors = parameter_list(params)
    state = adam_init(tensors, lr=tc.lr)
    start_step = 0
    ckpt_path = out_dir / "vae.ckpt"
    if resume is not None:
        state, start_step = _load_training_state(resume, params, tc.lr)

    m = config.dataset.num_latent_tokens
    curve_path = out_dir / "vae_loss.csv"
    curve_mode = "a" if (resume is not None and curve_path.exists()) else "w"
    with open(curve_path, curve_mode, newline="") as curve_file:
        writer = csv.writer(curve_file)
        if curve_mode == "w":
            writer.writerow(["step", "loss", "near_surface_mae"])
        for step in range(start_step, tc.steps):
            rng = np.random.default_rng(_step_seed(tc.seed, step))
            sdf_fn, cloud = shapes[int(rng.integers(len(shapes)))]
            queries = two_stage_downsample(
                cloud, m, seed=int(rng.integers(2 ** 31)))
            pts, true_vals = _training_positions(
                rng, cloud, sdf_fn, tc.batch_positions, tc.near_surface_sigma)
            state.hyper["lr"] = tc.lr * min(1.0, (step + 1) / max(1, tc.warmup_steps))
            zero_grads(tensors)
            with Tape() as tape:
                latent = encode(cloud, queries, params, mode="sampled",
                                seed=int(rng.integers(2 ** 31)))
                pred = decode(latent, pts, params)
                loss = vae_loss(pred, Tensor(true_vals), latent.mean,
                                latent.logvar, beta_kl=tc.beta_kl)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise RuntimeError(
                        f"vae training diverged: non-finite loss at step {step}")
                backward(loss, tape)
            adam_step(tensors, [t.grad for t in tensors], state)
            if step % tc.log_every == 0 or step == tc.steps - 1:
                probe_fn, probe_cloud = shapes[step % len(shapes)]
                bundle = VaeBundle(params, vcfg, m,
                                   config.dataset.num_surface_points)
                mae = near_surface_mae(bundle, probe_cloud, probe_fn,
                                       seed=step)
                writer.writerow([step, f"{loss_val:.8f}", f"{mae:.8f}"])

    _save_training_state(
        ckpt_path, params, state, tc.steps,
        sidecar={"vae_config": dataclasses.asdict(vcfg),
                 "train_config": dataclasses.asdict(tc),
                 "num_latent_tokens": m,
                 "num_surface_points": config.dataset.num_surface_points})
    return ckpt_path


# ---------------------------------------------------------------------------
# flow training


def encode_pairs(config: RunConfig, data_dir, vae: VaeBundle,
                 token_matching: bool = True) -> list[LatentPair]:
    """Deterministically encode every train pair into coupled latents."""
    manifest = load_manifest(data_dir)
    pairs = []
    for entry_id in manifest["train_ids"]:
        e = load_entry(data_dir, entry_id)
        z1 = encode(e.fine_cloud, e.fine_queries, vae.params).mean.data
        if token_matching:
            coarse_queries = e.matching.coarse_queries
        else:
            # ablation: independent coarse anchors instead of matched ones
            coarse_queries = two_stage_downsample(
                e.coarse_cloud, len(e.fine_queries),
                seed=_entry_seeds(config.dataset.seed, entry_id)[5])
        z0 = encode(e.coarse_cloud, coarse_queries, vae.params).mean.data
        pairs.append(LatentPair(z0=z0, z1=z1, y=e.condition,
                                matching=e.matching, pair_id=entry_id))
    return pairs


def train_flow(config: RunConfig, data_dir=None, vae_ckpt=None,
               out_dir=None, resume=None) -> Path:
    """Train the velocity network on coupled latents; writes a checkpoint,
    a loss-curve CSV, and the resolved config."""
    config.validate()
    data_dir = Path(data_dir if data_dir is not None else config.paths.data_dir)
    out_dir = Path(out_dir if out_dir is not None else config.paths.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)
    if vae_ckpt is None:
        vae_ckpt = Path(config.paths.checkpoint_dir) / "vae.ckpt"
    vae = load_vae_bundle(vae_ckpt)

    fc = config.flow
    pairs = encode_pairs(config, data_dir, vae,
                         token_matching=fc.token_matching)
    if not pairs:
        raise ValueError("dataset has no training pairs")
    latent_len, latent_width = pairs[0].z0.shape
    dit_config = fc.dit_config(latent_len, latent_width)
    cond_param_len = len(pairs[0].y)
    params = init_dit(dit_config, cond_param_len=cond_param_len,
                      num_cond_tokens=fc.num_cond_tokens, seed=fc.seed)
    tensors = parameter_list(params)
    state = adam_init(tensors, lr=fc.lr)
    start_step = 0
    if resume is not None:
        state, start_step = _load_training_state(resume, params, fc.lr)

    hyper = fc.hyper()
    schedule = NoiseSchedule()
    ckpt_path = out_dir / "flow.ckpt"
    curve_path = out_dir / "flow_loss.csv"
    curve_mode = "a" if (resume is not None and curve_path.exists()) else "w"
    with open(curve_path, curve_mode, newline="") as curve_file:
        writer = csv.writer(curve_file)
        if curve_mode == "w":
            writer.writerow(["step", "loss"])
        for step in range(start_step, fc.steps):
            rng = np.random.default_rng(_step_seed(fc.seed, step))
            idx = rng.choice(len(pairs), size=min(fc.batch_size, len(pairs)),
                             replace=len(pairs) < fc.batch_size)
            batch = [pairs[i] for i in idx]
            state.hyper["lr"] = fc.lr * min(1.0, (step + 1) / max(1, fc.warmup_steps))
            loss_val = flow_mod.train_step(batch, params, state, hyper,
                                           schedule,
                                           seed=_step_seed(fc.seed, step))
            if not np.isfinite(loss_val):
                raise RuntimeError(
                    f"flow training diverged: non-finite loss at step {step}")
            if step % fc.log_every == 0 or step == fc.steps - 1:
                writer.writerow([step, f"{loss_val:.8f}"])

    _save_training_state(
        ckpt_path, params, state, fc.steps,
        sidecar={"dit_config": dataclasses.asdict(dit_config),
                 "hyper": dataclasses.asdict(hyper),
                 "train_config": dataclasses.asdict(fc),
                 "cond_param_len": cond_param_len,
                 "num_cond_tokens": fc.num_cond_tokens})
    return ckpt_path


# ---------------------------------------------------------------------------
# refinement


def decoded_field(vae: VaeBundle, tokens: np.ndarray):
    """Wrap decoded latent tokens as a plain field function over positions."""
    latent = vae_mod.LatentSet(tokens=Tensor(tokens), mean=Tensor(tokens),
                               logvar=Tensor(np.zeros_like(tokens)))
    def fn(pts):
        return decode(latent, np.asarray(pts, dtype=np.float64),
                      vae.params).data
    return fn


@dataclass
class RefineResult:
    mesh: TriMesh
    z0: np.ndarray
    z1_hat: np.ndarray
    transform: BoxTransform
    states: Optional[list] = None
    metrics: Optional[dict] = None


def load_coarse_input(source, num_points: int, seed: int = 0) -> PointCloud:
    """Accept a ShapeSpec (.json), mesh (.obj), cloud (.npy), or objects."""
    if isinstance(source, ShapeSpec):
        return sample_surface(source, num_points, seed=seed)
    if isinstance(source, PointCloud):
        return source
    if isinstance(source, TriMesh):
        return sample_mesh_surface(source, num_points, seed=seed)
    path = Path(source)
    suffix = path.suffix.lower()
    if suffix == ".json":
        return sample_surface(ShapeSpec.load(path), num_points, seed=seed)
    if suffix == ".obj":
        mesh = load_obj(path)
        if len(mesh.triangles) == 0:
            raise ValueError(
                f"{path}: mesh has no triangles to sample; provide a denser "
                "mesh or a point cloud")
        return sample_mesh_surface(mesh, num_points, seed=seed)
    if suffix == ".npy":
        return PointCloud(np.load(path))
    raise ValueError(f"unsupported coarse input {path} "
                     "(expected .json spec, .obj mesh, or .npy cloud)")


def refine(source, condition, vae: VaeBundle, flow: FlowBundle,
           eval_config: EvalConfig = None, seed: int = 0,
           hyper_overrides: dict = None, use_noise_aug: bool = False,
           record_trajectory: bool = False, normalize: bool = True,
           truth_spec: ShapeSpec = None) -> RefineResult:
    """Coarse input -> normalized cloud -> coupled latent -> flow sample ->
    decoded SDF grid -> triangle mesh (plus metrics when truth is given).

    normalize=False keeps the input frame (for clouds already normalized
    jointly with their ground truth).
    """
    eval_config = eval_config or EvalConfig()
    hyper = dataclasses.replace(flow.hyper, **(hyper_overrides or {}))
    if eval_config.cfg_scale is not None and (
            hyper_overrides is None or "cfg_scale" not in hyper_overrides):
        hyper = dataclasses.replace(hyper, cfg_scale=eval_config.cfg_scale)

    cloud = load_coarse_input(source, vae.num_surface_points, seed=seed)
    if len(cloud) < 4 * vae.num_latent_tokens:
        raise ValueError(
            f"coarse input yields {len(cloud)} surface samples; need at "
            f"least {4 * vae.num_latent_tokens} (sample the input more "
            "densely)")
    if normalize:
        cloud, transform = normalize_to_unit_box(cloud)
    else:
        transform = BoxTransform(1.0, np.zeros(3))
    queries = two_stage_downsample(cloud, vae.num_latent_tokens, seed=seed)
    z0 = encode(cloud, queries, vae.params).mean.data

    cond_vec = np.asarray(condition, dtype=np.float64).reshape(-1)
    if cond_vec.shape[0] != flow.cond_param_len:
        raise ValueError(
            f"condition vector has {cond_vec.shape[0]} entries; the flow "
            f"model expects {flow.cond_param_len}")
    y = condition_tokens(flow.params, cond_vec)
    velocity = velocity_fn(flow.params, y)
    out = flow_mod.sample(z0, velocity, hyper, flow.schedule, seed=seed,
                          use_noise_aug=use_noise_aug,
                          record_trajectory=record_trajectory)
    z1_hat, states = out if record_trajectory else (out, None)

    field = decoded_field(vae, z1_hat)
    grid = build_sdf_grid(field, resolution=eval_config.grid_resolution)
    mesh = marching_cubes(grid)

    metrics = None
    if truth_spec is not None:
        metrics = refine_metrics(mesh, truth_spec, transform, field,
                                 eval_config, seed=seed)
    return RefineResult(mesh=mesh, z0=z0, z1_hat=z1_hat, transform=transform,
                        states=states, metrics=metrics)


def vae_roundtrip(source, vae: VaeBundle, eval_config: EvalConfig = None,
                  seed: int = 0, normalize: bool = True) -> TriMesh:
    """Encode-decode a shape without any flow transport, then mesh it.

    Mirrors refine()'s sampling/normalization so an untrained (zero
    velocity) flow reproduces this mesh exactly.
    """
    eval_config = eval_config or EvalConfig()
    cloud = load_coarse_input(source, vae.num_surface_points, seed=seed)
    if normalize:
        cloud, _ = normalize_to_unit_box(cloud)
    queries = two_stage_downsample(cloud, vae.num_latent_tokens, seed=seed)
    tokens = encode(cloud, queries, vae.params).mean.data
    grid = build_sdf_grid(decoded_field(vae, tokens),
                          resolution=eval_config.grid_resolution)
    return marching_cubes(grid)


def refine_metrics(mesh: TriMesh, truth_spec: ShapeSpec,
                   transform: BoxTransform, field, eval_config: EvalConfig,
                   seed: int = 0, coarse_spec: ShapeSpec = None) -> dict:
    """Chamfer / SDF-error metrics in the normalized frame."""
    n = eval_config.metric_samples
    fine_pts = transform.apply(
        sample_surface(truth_spec, n, seed=seed + 1).points)
    out = {}
    if not mesh.is_empty:
        refined_pts = sample_mesh_surface(mesh, n, seed=seed + 2).points
        out["chamfer_refined"] = chamfer_distance(refined_pts, fine_pts)
    else:
        out["chamfer_refined"] = float("inf")
    if coarse_spec is not None:
        coarse_pts = transform.apply(
            sample_surface(coarse_spec, n, seed=seed + 3).points)
        out["chamfer_coarse"] = chamfer_distance(coarse_pts, fine_pts)
    rng = np.random.default_rng(seed + 4)
    band = fine_pts[rng.integers(0, len(fine_pts), min(n, 2048))] \
        + rng.normal(0.0, 0.02, size=(min(n, 2048), 3))
    out["sdf_mae"] = sdf_mae(field, make_sdf(truth_spec, transform), band)
    return out


def improvement_ratio(chamfer_coarse: float, chamfer_refined: float) -> float:
    if chamfer_coarse == 0.0:
        return 0.0
    return (chamfer_coarse - chamfer_refined) / chamfer_coarse


def evaluate(config: RunConfig, data_dir=None, vae_ckpt=None, flow_ckpt=None,
             out_dir=None, entry_ids=None) -> dict:
    """Refine every held-out pair and report chamfer improvements."""
    config.validate()
    data_dir = Path(data_dir if data_dir is not None else config.paths.data_dir)
    out_dir = Path(out_dir if out_dir is not None else config.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)
    ckpt_dir = Path(config.paths.checkpoint_dir)
    vae = load_vae_bundle(vae_ckpt if vae_ckpt is not None
                          else ckpt_dir / "vae.ckpt")
    flow = load_flow_bundle(flow_ckpt if flow_ckpt is not None
                            else ckpt_dir / "flow.ckpt")

    manifest = load_manifest(data_dir)
    if entry_ids is None:
        entry_ids = manifest["holdout_ids"]
    if not entry_ids:
        raise ValueError("evaluation split is empty")

    ec = config.eval
    rows = []
    for entry_id in entry_ids:
        e = load_entry(data_dir, entry_id)
        result = refine(e.coarse_cloud, e.condition, vae, flow,
                        eval_config=ec, seed=ec.seed + entry_id,
                        use_noise_aug=ec.use_noise_aug, normalize=False)
        # entry clouds are already normalized, so the frame is shared
        metrics = refine_metrics(
            result.mesh, e.fine_spec, e.transform,
            decoded_field(vae, result.z1_hat), ec,
            seed=ec.seed + entry_id, coarse_spec=e.coarse_spec)
        rows.append({
            "shape_id": entry_id,
            "chamfer_coarse": metrics["chamfer_coarse"],
            "chamfer_refined": metrics["chamfer_refined"],
            "improvement": improvement_ratio(metrics["chamfer_coarse"],
                                             metrics["chamfer_refined"]),
            "sdf_mae": metrics["sdf_mae"],
        })

    report_path = out_dir / "eval_metrics.csv"
    with open(report_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (v if isinstance(v, int) else f"{v:.8f}")
                             for k, v in row.items()})

    wins = sum(1 for r in rows if r["chamfer_refined"] < r["chamfer_coarse"])
    summary = {
        "num_shapes": len(rows),
        "wins": wins,
        "win_fraction": wins / len(rows),
        "mean_chamfer_coarse": float(np.mean([r["chamfer_coarse"] for r in rows])),
        "mean_chamfer_refined": float(np.mean([r["chamfer_refined"] for r in rows])),
        "mean_improvement": float(np.mean([r["improvement"] for r in rows])),
        "rows": rows,
    }
    with open(out_dir / "eval_summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    lines = [
        f"evaluated {summary['num_shapes']} held-out shapes",
        f"refined beats coarse on {wins}/{len(rows)} "
        f"({100 * summary['win_fraction']:.0f}%)",
        f"mean chamfer: coarse {summary['mean_chamfer_coarse']:.5f} -> "
        f"refined {summary['mean_chamfer_refined']:.5f} "
        f"(improvement {100 * summary['mean_improvement']:.1f}%)",
    ]
    with open(out_dir / "eval_summary.txt", "w") as f:
        f.write("\n".join(lines) + "\n")
    return summary
