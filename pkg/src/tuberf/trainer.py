"""Staged per-block training: schedule, densification families, losses, checkpoints.

Each iteration renders one fused batch of rays:

* original views: one ``patch_size`` square patch plus random pixels across the stage's frames
  (RGB + depth supervision, the ``ori`` component);
* helix poses (views >= 2): random valid pixels of warped pseudo-labels between consecutive stage frames;
* spin poses (views >= 3): a draw from the current frame's spin ray pool;
* every ``vit_every`` iterations, a ``vit_patch`` square rendered at a helix or spin pose and compared in
  feature space with the warped label (the ``vit`` component).

The visibility head is fitted to the detached transmittance of a subset of the original rays.
"""
from __future__ import annotations

import copy
import csv
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .densify import SPIN_ANGLES, build_helix_labels, build_spin_pool, sample_spin_rays, spin_label
from .features import ExtractorSpec, builtin_extractor
from .field import EncodingConfig, FieldConfig, MultiLevelField, StageSchedule, schedule_frames
from .geometry import CameraIntrinsics, ray_arrays
from .losses import (COMPONENTS, LossWeights, NonFiniteLoss, depth_loss, ori_terms, total_loss, trans_loss,
                     transmittance_targets, vit_loss)
from .renderer import RenderConfig, render_rays

CHECKPOINT_KIND = "tuberf-block"


@dataclass
class TrainConfig:
    iterations_per_stage: int = 5000
    stage_count: int = 3
    views: int = 3
    patch_size: int = 8
    patches: int = 4
    random_rays: int = 768
    helix_rays: int = 1024
    helix_n: int = 3
    spin_rays: int = 3136
    spin_angles: tuple = SPIN_ANGLES
    spin_refresh: int = 50
    vit_patch: int = 16
    vit_every: int = 1
    trans_rays: int = 64
    trans_target: str = "transmittance"
    smooth_l1_beta: float = 1.0
    lr: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderConfig = dc_field(default_factory=lambda: RenderConfig(samples_per_ray=64, stratified_jitter=True))
    extractor: ExtractorSpec = dc_field(default_factory=ExtractorSpec)
    eval_samples: int = 128

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)
        if isinstance(self.render, dict):
            self.render = RenderConfig(**self.render)
        if isinstance(self.extractor, dict):
            self.extractor = ExtractorSpec(**self.extractor)
        self.spin_angles = tuple(float(a) for a in self.spin_angles)
        if self.views not in (1, 2, 3):
            raise ValueError("views must be 1, 2 or 3")
        if self.iterations_per_stage < 0 or self.stage_count < 1:
            raise ValueError("iterations_per_stage must be >= 0 and stage_count >= 1")
        if self.trans_target not in ("transmittance", "alpha"):
            raise ValueError(f"unknown trans_target {self.trans_target!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spin_angles"] = list(self.spin_angles)
        d["render"]["background"] = list(self.render.background)
        d["field"]["scene_center"] = list(self.field.scene_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        if "render" in d and "background" in d["render"]:
            d["render"]["background"] = tuple(d["render"]["background"])
        return cls(**d)

    @property
    def total_iterations(self) -> int:
        return self.iterations_per_stage * self.stage_count


def desk_config(**overrides) -> TrainConfig:
    """Small preset sized for a single CPU core at 96x96."""
    base = dict(
        iterations_per_stage=3000, patches=1, random_rays=96, helix_rays=48, spin_rays=48, vit_every=8,
        trans_rays=16, lr=5e-3, lr_final=2.5e-4,
        field=FieldConfig(encoding=EncodingConfig(position_bands=6, direction_bands=2), trunk_depth=3,
                          trunk_width=32, color_width=16, visibility_depth=2, visibility_width=32),
        render=RenderConfig(samples_per_ray=24, stratified_jitter=True),
        eval_samples=64,
    )
    base.update(overrides)
    return TrainConfig(**base)


def scene_normalization(frames, far: float) -> tuple[tuple, float]:
    pos = np.stack([f.pose.t for f in frames])
    center = pos.mean(axis=0)
    scale = float(np.max(np.linalg.norm(pos - center, axis=1)) + far)
    return tuple(float(v) for v in center), scale


def _valid_patch_corner(valid: np.ndarray, size: int, rng: np.random.Generator, min_fraction: float = 0.9):
    h, w = valid.shape
    ii = np.pad(np.cumsum(np.cumsum(valid.astype(np.int64), 0), 1), ((1, 0), (1, 0)))
    counts = ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]
    frac = counts / float(size * size)
    ok = np.flatnonzero(frac.ravel() >= min_fraction)
    if ok.size == 0:
        ok = np.flatnonzero(frac.ravel() == frac.max())
    k = ok[rng.integers(ok.size)]
    return divmod(int(k), frac.shape[1])


def _patch_uv(top: int, left: int, size: int) -> np.ndarray:
    v, u = np.mgrid[top:top + size, left:left + size]
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(float)


class Trainer:
    """Trains one block. ``frames`` are the block's training frames in trajectory order."""

    def __init__(self, frames, K: CameraIntrinsics, near: float, far: float, config: TrainConfig,
                 log_path=None):
        if not frames:
            raise ValueError("no training frames")
        self.frames = list(frames)
        self.K = K
        self.near, self.far = float(near), float(far)
        self.config = copy.deepcopy(config)
        c = self.config
        if c.field.scene_scale == 1.0 and tuple(c.field.scene_center) == (0.0, 0.0, 0.0):
            c.field.scene_center, c.field.scene_scale = scene_normalization(self.frames, self.far)
        self.field = MultiLevelField(c.field, n_stages=1)
        self.optimizer = ad.Adam(self.field.trainable_parameters(), lr=c.lr)
        self.rng = np.random.default_rng(c.seed)
        self.schedule = StageSchedule(len(self.frames), c.stage_count)
        self.stage = 1
        self.iteration = 0          # global iteration count
        self.history: list[dict] = []
        self.extractor = builtin_extractor(c.extractor)
        self.spin_frame: int | None = None
        self._pools: OrderedDict = OrderedDict()
        self._helix_cache: dict = {}
        self.log_path = Path(log_path) if log_path else None
        self._uv_all = K.pixel_grid()
        self._rgb = np.stack([f.rgb.reshape(-1, 3) for f in self.frames])
        self._depth = np.stack([f.depth.reshape(-1) for f in self.frames])

    # ---------------------------------------------------------------- helpers
    def stage_frames(self, stage: int | None = None) -> list[int]:
        return schedule_frames(self.schedule, stage or self.stage)

    def helix_labels(self):
        key = self.stage
        if key not in self._helix_cache:
            idx = self.stage_frames()
            labels = []
            for a, b in zip(idx[:-1], idx[1:]):
                labels.extend(build_helix_labels(self.frames[a], self.frames[b], self.K, self.config.helix_n))
            self._helix_cache = {key: labels}
        return self._helix_cache[key]

    def spin_pool(self, frame_index: int):
        if frame_index not in self._pools:
            self._pools[frame_index] = build_spin_pool(self.frames[frame_index], self.K, self.config.spin_angles)
            while len(self._pools) > 2:
                self._pools.popitem(last=False)
        return self._pools[frame_index]

    def lr_at(self, iteration: int) -> float:
        c = self.config
        total = max(1, c.total_iterations)
        return c.lr * (c.lr_final / c.lr) ** (min(iteration, total) / total)

    # ---------------------------------------------------------------- batches
    def _original_batch(self, stage_idx: list[int]):
        c, K, rng = self.config, self.K, self.rng
        parts = []
        for _ in range(c.patches):
            fi = stage_idx[rng.integers(len(stage_idx))]
            top = int(rng.integers(0, K.height - c.patch_size + 1))
            left = int(rng.integers(0, K.width - c.patch_size + 1))
            uv = _patch_uv(top, left, c.patch_size)
            pix = (uv[:, 1] * K.width + uv[:, 0]).astype(np.int64)
            parts.append((fi, uv, pix))
        fr = np.asarray(stage_idx)[rng.integers(len(stage_idx), size=c.random_rays)]
        pix = rng.integers(K.width * K.height, size=c.random_rays)
        return parts, fr, pix

    def _rays_for(self, frame_idx, pix):
        """Origins, directions and cos factors for (frame index, flat pixel) pairs."""
        uv = self._uv_all[pix]
        o = np.empty((len(pix), 3))
        d = np.empty((len(pix), 3))
        cz = np.empty(len(pix))
        for fi in np.unique(frame_idx):
            m = frame_idx == fi
            o[m], d[m], cz[m] = ray_arrays(self.frames[fi].pose, self.K, uv[m])
        return o, d, cz

    # ------------------------------------------------------------------- step
    def step(self) -> dict:
        c, K, rng = self.config, self.K, self.rng
        stage_idx = self.stage_frames()
        local_it = self.iteration - (self.stage - 1) * c.iterations_per_stage
        seg = OrderedDict()
        O, D, CZ = [], [], []

        def add(name, o, d, cz):
            start = sum(len(x) for x in O)
            O.append(o)
            D.append(d)
            CZ.append(cz)
            seg[name] = (start, start + len(o))

        patches, rfr, rpix = self._original_batch(stage_idx)
        p_rgb, p_depth = [], []
        for j, (fi, uv, pix) in enumerate(patches):
            add(f"patch{j}", *ray_arrays(self.frames[fi].pose, K, uv))
            p_rgb.append(self._rgb[fi][pix])
            p_depth.append(self._depth[fi][pix])
        add("rand", *self._rays_for(rfr, rpix))
        r_rgb, r_depth = self._rgb[rfr, rpix], self._depth[rfr, rpix]

        helix_t = spin_t = vit_t = None
        if c.views >= 2 and len(stage_idx) > 1 and c.helix_rays > 0:
            labels = self.helix_labels()
            li = rng.integers(len(labels), size=c.helix_rays)
            hp = np.empty(c.helix_rays, dtype=np.int64)
            for j, l in enumerate(li):
                ok = np.flatnonzero(labels[l].valid.ravel())
                hp[j] = ok[rng.integers(ok.size)]
            o = np.empty((c.helix_rays, 3))
            d = np.empty((c.helix_rays, 3))
            cz = np.empty(c.helix_rays)
            for l in np.unique(li):
                m = li == l
                o[m], d[m], cz[m] = ray_arrays(labels[l].pose, K, self._uv_all[hp[m]])
            add("helix", o, d, cz)
            helix_t = np.array([labels[l].depth.ravel()[p] for l, p in zip(li, hp)])
        if c.views >= 3 and c.spin_rays > 0:
            if self.spin_frame is None or local_it % c.spin_refresh == 0:
                self.spin_frame = int(stage_idx[rng.integers(len(stage_idx))])
            sb = sample_spin_rays(self.spin_pool(self.spin_frame), c.spin_rays, rng)
            add("spin", sb.origins, sb.dirs, sb.cosz)
            spin_t = sb.depth
        vit_family = None
        if c.views >= 2 and c.vit_every > 0 and local_it % c.vit_every == 0:
            fams = ["helix"] + (["spin"] if c.views >= 3 else [])
            vit_family = fams[(local_it // c.vit_every) % len(fams)]
            if vit_family == "helix":
                labels = self.helix_labels() if len(stage_idx) > 1 else []
                lab = labels[rng.integers(len(labels))] if labels else None
            else:
                fi = self.spin_frame if self.spin_frame is not None else int(stage_idx[0])
                lab = spin_label(self.frames[fi], K, int(rng.integers(len(self.spin_pool(fi).poses))),
                                 c.spin_angles)
            if lab is None:
                vit_family = None
            else:
                top, left = _valid_patch_corner(lab.valid, c.vit_patch, rng)
                uv = _patch_uv(top, left, c.vit_patch)
                add("vit", *ray_arrays(lab.pose, K, uv))
                sl = (slice(top, top + c.vit_patch), slice(left, left + c.vit_patch))
                vit_t = (lab.rgb[sl], lab.valid[sl])

        origins, dirs, cosz = np.concatenate(O), np.concatenate(D), np.concatenate(CZ)
        with Tape() as tape:
            b = render_rays(self.field, origins, dirs, self.near, self.far, c.render, self.stage, rng)
            zdepth = b.depth * cosz

            def part(t, name):
                s, e = seg[name]
                return t[s:e]

            patch_rgb = ad.concat([part(b.color, f"patch{j}") for j in range(len(patches))], axis=0)
            patch_d = ad.concat([part(zdepth, f"patch{j}") for j in range(len(patches))], axis=0)
            l_patch, l_rand = ori_terms(patch_rgb, np.concatenate(p_rgb), patch_d, np.concatenate(p_depth),
                                        part(b.color, "rand"), r_rgb, part(zdepth, "rand"), r_depth)
            comps = {"ori": l_patch + l_rand}
            sub = {"ori_patch": l_patch.item(), "ori_rand": l_rand.item()}
            d_h = d_s = None
            if helix_t is not None:
                d_h = depth_loss(part(zdepth, "helix"), helix_t, helix_t > 0, beta=c.smooth_l1_beta)
            if spin_t is not None:
                d_s = depth_loss(part(zdepth, "spin"), spin_depth=spin_t, spin_mask=spin_t > 0,
                                 beta=c.smooth_l1_beta)
            sub["depth_helix"] = d_h.item() if d_h is not None else 0.0
            sub["depth_spin"] = d_s.item() if d_s is not None else 0.0
            d_terms = [t for t in (d_h, d_s) if t is not None]
            if d_terms:
                comps["depth"] = d_terms[0] if len(d_terms) == 1 else d_terms[0] + d_terms[1]
            sub["vit_helix"] = sub["vit_spin"] = 0.0
            if vit_family is not None:
                n = c.vit_patch
                rendered = ad.reshape(part(b.color, "vit"), (n, n, 3))
                lv = vit_loss(self.extractor, vit_t[0], rendered, vit_t[1])
                comps["vit"] = lv
                sub[f"vit_{vit_family}"] = lv.item()
            # visibility head on the first original rays' samples
            nt = min(c.trans_rays, len(origins))
            if nt > 0:
                vis = self.field.visibility(b.points[:nt].reshape(-1, 3), dirs[:nt])
                target = transmittance_targets(b, c.trans_target)[:nt]
                comps["trans"] = trans_loss(vis, target)
            loss = total_loss(comps, c.weights)
            tape.backward(loss)
        self.optimizer.step(self.lr_at(self.iteration))
        row = {"iteration": self.iteration, "stage": self.stage}
        for k in COMPONENTS:
            row[k] = float(comps[k].item()) if k in comps else 0.0
        row["total"] = float(loss.item())
        row.update(sub)
        check = sum(getattr(c.weights, k) * row[k] for k in COMPONENTS)
        if not math.isclose(check, row["total"], rel_tol=1e-9, abs_tol=1e-12):
            raise AssertionError(f"total {row['total']} != weighted sum {check}")
        self.history.append(row)
        self._log(row)
        self.iteration += 1
        return row

    def _log(self, row):
        if self.log_path is None:
            return
        new = not self.log_path.exists()
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["iteration", "L_depth", "L_ori", "L_ViT", "L_trans", "total"])
            w.writerow([row["iteration"], repr(row["depth"]), repr(row["ori"]), repr(row["vit"]),
                        repr(row["trans"]), repr(row["total"])])

    # -------------------------------------------------------------- schedule
    def advance_stage(self):
        if self.stage >= self.config.stage_count:
            raise RuntimeError("already at the final stage")
        self.field.add_stage()
        self.optimizer = self._rebuild_optimizer()
        self.stage += 1
        self.spin_frame = None

    def _rebuild_optimizer(self):
        old = self.optimizer
        opt = ad.Adam(self.field.trainable_parameters(), lr=self.config.lr)
        for k in opt.params:
            if k in old.state.m:
                opt.state.m[k] = old.state.m[k]
                opt.state.v[k] = old.state.v[k]
        opt.state.step = old.state.step
        return opt

    def run(self, until: int | None = None, stage_callback=None):
        """Train to global iteration ``until`` (default: the end), adding stages on schedule."""
        c = self.config
        if c.iterations_per_stage == 0:
            while self.stage < c.stage_count:
                self.advance_stage()
            return self
        end = c.total_iterations if until is None else min(until, c.total_iterations)
        while self.iteration < end:
            if self.iteration >= self.stage * c.iterations_per_stage:
                self.advance_stage()
            self.step()
            if self.iteration == self.stage * c.iterations_per_stage and stage_callback is not None:
                stage_callback(self)
        return self

    # ------------------------------------------------------------ checkpoints
    def state_header(self) -> dict:
        return {"kind": CHECKPOINT_KIND, "config": self.config.to_dict(), "stage": self.stage,
                "n_stages": self.field.n_stages, "iteration": self.iteration, "spin_frame": self.spin_frame,
                "rng_state": self.rng.bit_generator.state, "adam_step": self.optimizer.state.step,
                "frame_ids": [int(f.id) for f in self.frames], "near": self.near, "far": self.far,
                "intrinsics": self.K.to_dict(), "history": self.history}

    def save(self, path):
        arrays = {f"param/{k}": v for k, v in self.field.state_arrays().items()}
        for k in self.optimizer.state.m:
            arrays[f"adam_m/{k}"] = self.optimizer.state.m[k]
            arrays[f"adam_v/{k}"] = self.optimizer.state.v[k]
        ad.save_checkpoint(path, arrays, self.state_header())

    @classmethod
    def resume(cls, path, frames, log_path=None) -> Trainer:
        header, arrays = ad.load_checkpoint(path)
        if header.get("kind") != CHECKPOINT_KIND:
            raise ValueError(f"{path}: not a block checkpoint")
        config = TrainConfig.from_dict(header["config"])
        by_id = {int(f.id): f for f in frames}
        try:
            block_frames = [by_id[i] for i in header["frame_ids"]]
        except KeyError as e:
            raise ValueError(f"{path}: frame {e} missing from the dataset") from e
        t = cls(block_frames, CameraIntrinsics.from_dict(header["intrinsics"]), header["near"], header["far"],
                config, log_path)
        for _ in range(header["n_stages"] - 1):
            t.field.add_stage()
        t.stage = header["stage"]
        t.field.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        t.optimizer = ad.Adam(t.field.trainable_parameters(), lr=config.lr)
        for k in t.optimizer.params:
            if f"adam_m/{k}" in arrays:
                t.optimizer.state.m[k] = arrays[f"adam_m/{k}"].copy()
                t.optimizer.state.v[k] = arrays[f"adam_v/{k}"].copy()
        t.optimizer.state.step = header["adam_step"]
        t.iteration = header["iteration"]
        t.spin_frame = header["spin_frame"]
        t.rng.bit_generator.state = header["rng_state"]
        t.history = header["history"]
        return t


def load_field(path) -> tuple[MultiLevelField, dict]:
    """Field and header from a block checkpoint."""
    header, arrays = ad.load_checkpoint(path)
    config = TrainConfig.from_dict(header["config"])
    f = MultiLevelField(config.field, n_stages=header["n_stages"])
    f.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    return f, header


def train_block(frames, K: CameraIntrinsics, near: float, far: float, config: TrainConfig, out_dir=None,
                name: str = "block0") -> Trainer:
    """Train one block through every stage; with ``out_dir`` writes stage checkpoints and a loss CSV."""
    out = Path(out_dir) if out_dir is not None else None
    log = out / f"{name}_loss.csv" if out is not None else None
    if log is not None and log.exists():
        log.unlink()
    t = Trainer(frames, K, near, far, config, log)

    def on_stage(tr):
        if out is not None:
            tr.save(out / f"{name}_stage{tr.stage}.ckpt")

    if config.iterations_per_stage == 0:
        t.run()
        for s in range(1, config.stage_count + 1):
            if out is not None:
                t.save(out / f"{name}_stage{s}.ckpt")
    else:
        t.run(stage_callback=on_stage)
    if out is not None:
        t.save(out / f"{name}.ckpt")
    return t


def train_all(dataset, train_frames, config: TrainConfig, out_dir, angle_threshold_deg: float = 25.0,
              min_block: int = 20, overlap: float = 0.30, jobs: int = 1) -> dict:
    """Divide the trajectory, train every block independently, and write ``manifest.json``."""
    from .segmentation import Trajectory, divide_detailed

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = Trajectory.from_frames(dataset.frames)
    division = divide_detailed(traj, angle_threshold_deg, min_block, overlap)
    train_ids = {int(f.id) for f in train_frames}
    jobs_list = []
    for b in division.blocks:
        bframes = [f for f in dataset.frames[b.start:b.end] if int(f.id) in train_ids]
        jobs_list.append((b, bframes))
    results = {}
    errors = {}

    def run_one(b, bframes):
        cfg = copy.deepcopy(config)
        cfg.seed = config.seed + b.index
        train_block(bframes, dataset.intrinsics, dataset.near, dataset.far, cfg, out, name=f"block{b.index}")
        return f"block{b.index}.ckpt"

    if jobs > 1 and len(jobs_list) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(jobs, len(jobs_list))) as ex:
            futs = {b.index: ex.submit(_train_block_job, bframes, dataset.intrinsics, dataset.near, dataset.far,
                                       config, b.index, str(out)) for b, bframes in jobs_list}
            for i, fut in futs.items():
                try:
                    results[i] = fut.result()
                except Exception as e:  # noqa: BLE001
                    errors[i] = repr(e)
    else:
        for b, bframes in jobs_list:
            try:
                results[b.index] = run_one(b, bframes)
            except NonFiniteLoss:
                raise
            except Exception as e:  # noqa: BLE001
                errors[b.index] = repr(e)
    manifest = division.manifest()
    manifest["checkpoints"] = {str(k): v for k, v in sorted(results.items())}
    manifest["errors"] = {str(k): v for k, v in sorted(errors.items())}
    manifest["train_config"] = config.to_dict()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _train_block_job(frames, K, near, far, config, index, out):
    cfg = copy.deepcopy(config)
    cfg.seed = config.seed + index
    train_block(frames, K, near, far, cfg, out, name=f"block{index}")
    return f"block{index}.ckpt"


def evaluate_field(field, frames, K: CameraIntrinsics, near: float, far: float, samples: int = 128,
                   active_stages: int | None = None, config_hash: str = ""):
    """Render every frame's pose and score it against the frame's RGB and depth."""
    from .metrics import EvalReport
    from .renderer import render_image

    report = EvalReport(config_hash=config_hash)
    rc = RenderConfig(samples_per_ray=samples)
    for f in frames:
        rgb, depth = render_image(field, f.pose, K, rc, active_stages, near=near, far=far)
        report.add(f.id, np.clip(rgb, 0.0, 1.0), f.rgb, depth, f.depth)
    return report


@dataclass
class BlockModel:
    """Trained blocks of one scene, ready for blended rendering."""

    fields: list
    centers: np.ndarray
    manifest: dict
    near: float
    far: float
    intrinsics: CameraIntrinsics

    def render(self, pose, samples: int | None = None, integration=None, use_visibility: bool = True):
        from .integration import render_blended

        n = samples or self.manifest.get("train_config", {}).get("eval_samples", 128)
        return render_blended(self.fields, self.centers, pose, self.intrinsics, RenderConfig(samples_per_ray=n),
                              integration, self.near, self.far, use_visibility=use_visibility)

    def evaluate(self, frames, samples: int | None = None, integration=None, config_hash: str = ""):
        from .metrics import EvalReport

        report = EvalReport(config_hash=config_hash)
        for f in frames:
            rgb, depth, _ = self.render(f.pose, samples, integration)
            report.add(f.id, np.clip(rgb, 0.0, 1.0), f.rgb, depth, f.depth)
        return report


def load_model(model_dir) -> BlockModel:
    d = Path(model_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath}: missing block manifest")
    manifest = json.loads(mpath.read_text())
    if manifest.get("errors"):
        raise RuntimeError(f"{mpath}: blocks failed to train: {manifest['errors']}")
    fields_, centers = [], []
    near = far = K = None
    for b in manifest["blocks"]:
        f, header = load_field(d / manifest["checkpoints"][str(b["index"])])
        fields_.append(f)
        centers.append(b["center"])
        near, far, K = header["near"], header["far"], CameraIntrinsics.from_dict(header["intrinsics"])
    return BlockModel(fields_, np.asarray(centers, dtype=float), manifest, near, far, K)
