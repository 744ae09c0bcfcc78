"""Stage orchestration: file layout, checkpoint bookkeeping, evaluation and
the ablation driver.  Every stage is a pure function of (config, upstream
artifacts) and overwrites its outputs deterministically."""
import csv
import logging
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, evalmetrics, io, kernels, latentspace, synthgen
from .config import RunConfig
from .diffusion import conditioning
from .diffusion import unet as unet_mod
from .diffusion.freeu import FreeUFactors
from .diffusion.schedule import make_schedule
from .diffusion.training import DiffusionTrainConfig, moving_average, train_diffusion
from .errors import DependencyError, ValidationError
from .flowwarp import networks as flownets
from .flowwarp.training import flatten_scores, train_flow_network, warp_scores
from .flowwarp.torchops import to_nchw
from .runtime import flush_denormal
from .sampler import SamplerConfig, sample

log = logging.getLogger(__name__)

OUT_ENV = "TRYONLAB_OUT"
AE_FIELDS = ("C", "P", "T", "C_w_gt")

# Table-3 style lattice: (name, training flags, init mode); the last two share a model
ABLATION_LATTICE = (
    ("baseline", dict(prior_branch=False, cons_loss=False), "gaussian"),
    ("prior", dict(prior_branch=True, cons_loss=False), "gaussian"),
    ("prior_cons", dict(prior_branch=True, cons_loss=True), "gaussian"),
    ("prior_cons_posterior", dict(prior_branch=True, cons_loss=True), "clothes_posterior"),
)


def out_root(cfg: RunConfig, override=None):
    return Path(override or os.environ.get(OUT_ENV) or cfg.out)


class Layout:
    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.ckpt = self.root / "checkpoints"
        self.curves = self.root / "curves"
        self.samples = self.root / "samples"
        self.reports = self.root / "reports"

    def model(self, name):
        return self.ckpt / name

    def diffusion(self, variant):
        return self.ckpt / "diffusion" / variant


def variant_name(flags):
    parts = []
    if flags.get("prior_branch", True):
        parts.append("prior")
    if flags.get("cons_loss", True):
        parts.append("cons")
    if not flags.get("global_cond", True):
        parts.append("noglobal")
    return "_".join(parts) or "baseline"


class Pipeline:
    def __init__(self, cfg: RunConfig, root=None, data=None):
        self.cfg = cfg
        self.layout = Layout(out_root(cfg, root))
        self.data_dir = Path(data) if data else self.layout.data
        self._dataset = None

    # ------------------------------------------------------------------ data
    def gen_data(self):
        d = self.cfg.data
        man = synthgen.build_dataset(self.data_dir, d.count, d.seed, tuple(d.canvas), d.train_fraction)
        log.info("dataset: %d samples at %s", man.count, self.data_dir)
        return man

    def dataset(self):
        if self._dataset is None:
            if not (self.data_dir / "dataset.json").exists():
                raise DependencyError(f"no dataset at {self.data_dir} (run `gen-data`)")
            self._dataset = synthgen.Dataset(self.data_dir)
        return self._dataset

    def _meta(self, role, sections, **extra):
        meta = {"role": role, "seed": self.cfg.seed,
                "fingerprint": self.cfg.fingerprint(*sections)}
        meta.update(extra)
        return meta

    def _load(self, path, role, command, builder, sections):
        try:
            arch, meta, state = checkpoint.read(path, role)
        except DependencyError as exc:
            raise DependencyError(f"missing {role} checkpoint (run `{command}`)") from exc
        if meta.get("fingerprint") != self.cfg.fingerprint(*sections):
            log.warning("%s checkpoint was produced under a different config", role)
        net = checkpoint.load_into(builder(arch), state)
        return latentspace.freeze(net), meta

    # ----------------------------------------------------------- autoencoder
    def train_autoencoder(self):
        ds = self.dataset()
        a = self.cfg.autoencoder
        tr, te = ds.split_indices("train"), ds.split_indices("test")
        # every image kind the diffusion stage encodes: garments, people, try-ons, warped garments
        imgs = np.concatenate([ds[f][tr] for f in AE_FIELDS])
        torch.manual_seed(self.cfg.seed)
        ae, hist = latentspace.train_autoencoder(
            imgs, steps=a.steps, batch_size=a.batch_size, lr=a.lr, kl_weight=a.kl_weight,
            downsample=a.downsample, latent_channels=a.latent_channels, widths=tuple(a.widths),
            seed=self.cfg.seed)
        held_out = {f: latentspace.reconstruction_error(ae, ds[f][te]) for f in AE_FIELDS}
        self.layout.curves.mkdir(parents=True, exist_ok=True)
        with open(self.layout.curves / "autoencoder.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "recon", "kl"])
            w.writerows([[s, f"{l:.8g}", f"{r:.8g}", f"{k:.8g}"] for s, l, r, k in hist])
        meta = self._meta("autoencoder", ("data", "autoencoder"), step=a.steps,
                          loss=hist[-1][1], heldout_l1=held_out)
        checkpoint.save(self.layout.model("autoencoder"), ae, ae.arch, meta)
        return ae, meta

    def autoencoder(self):
        return self._load(self.layout.model("autoencoder"), "autoencoder", "train-autoencoder",
                          latentspace.build, ("data", "autoencoder"))[0]

    # ------------------------------------------------------------ flow nets
    def train_flow(self, role):
        ds = self.dataset()
        ae = self.autoencoder()
        fc = getattr(self.cfg, role)
        tr, te = ds.split_indices("train"), ds.split_indices("test")
        net, hist = train_flow_network(
            ds.arrays, role, indices=tr, epochs=fc.epochs, batch_size=fc.batch_size, lr=fc.lr,
            hold_frac=fc.hold_frac, weights=fc.weights, steps=fc.steps,
            extractor=lambda x: latentspace.perceptual_features(x, ae), seed=self.cfg.seed)
        scorer = flatten_scores if role == "flatten" else warp_scores
        est, base = scorer(net, ds.arrays, te)
        meta = self._meta(role, ("data", "autoencoder", role), step=hist["steps"],
                          loss=hist["final_loss"], monotone=hist["monotone"],
                          epe=hist["epe"], test_l1=float(est.mean()), test_baseline_l1=float(base.mean()))
        self.layout.curves.mkdir(parents=True, exist_ok=True)
        io.write_json(self.layout.curves / f"{role}.json",
                      {"epoch_loss": hist["epoch_loss"], "smoothed": hist["smoothed"], "epe": hist["epe"]})
        checkpoint.save(self.layout.model(role), net, net.arch, meta)
        log.info("%s: test masked L1 %.4f vs baseline %.4f", role, est.mean(), base.mean())
        return net, meta

    def flow_net(self, role):
        command = "train-warp" if role == "warp" else "train-flatten"
        return self._load(self.layout.model(role), role, command, flownets.build,
                          ("data", "autoencoder", role))[0]

    # ------------------------------------------------------------- diffusion
    def schedule(self):
        return make_schedule(self.cfg.diffusion.schedule, self.cfg.diffusion.T)

    def _diffusion_cfg(self, flags):
        d = self.cfg.diffusion
        return DiffusionTrainConfig(
            steps=d.steps, batch_size=d.batch_size, lr=d.lr, warmup_steps=d.warmup_steps,
            warmup_start=d.warmup_start, cfg_drop=d.cfg_drop, lambda_cons=d.lambda_cons,
            prior_branch=flags["prior_branch"], cons_loss=flags["cons_loss"],
            global_cond=flags["global_cond"], seed=self.cfg.seed)

    def _arches(self):
        d = self.cfg.diffusion
        unet_arch = dict(latent_channels=self.cfg.autoencoder.latent_channels,
                         channels=list(d.channels), time_dim=d.time_dim, token_dim=d.token_dim)
        return unet_arch, dict(token_dim=d.token_dim)

    def train_diffusion(self, flags=None):
        flags = dict(vars(self.cfg.ablation), **(flags or {}))
        ae = self.autoencoder()
        warp_net = self.flow_net("warp")
        flatten_net = self.flow_net("flatten") if flags["cons_loss"] and self.cfg.diffusion.lambda_cons > 0 else None
        ds = self.dataset()
        tr = np.asarray(ds.split_indices("train"))
        with flush_denormal():
            pairs = conditioning.prepare_pairs(ds.arrays, tr, tr, ae, warp_net)
        variant = variant_name(flags)
        out = self.layout.diffusion(variant)
        out.mkdir(parents=True, exist_ok=True)
        self.layout.curves.mkdir(parents=True, exist_ok=True)
        unet_arch, tok_arch = self._arches()
        frozen = {k: checkpoint.state_hash(m) for k, m in
                  (("autoencoder", ae), ("warp", warp_net), ("flatten", flatten_net)) if m is not None}
        unet, tok, curve = train_diffusion(pairs, self.schedule(), ae, flatten_net, self._diffusion_cfg(flags),
                                           unet_arch, tok_arch,
                                           curve_path=self.layout.curves / f"diffusion_{variant}.csv")
        after = {k: checkpoint.state_hash(m) for k, m in
                 (("autoencoder", ae), ("warp", warp_net), ("flatten", flatten_net)) if m is not None}
        if after != frozen:
            raise RuntimeError("a frozen network changed during diffusion training")
        sections = ("data", "autoencoder", "warp", "flatten", "diffusion")
        meta = self._meta("diffusion", sections, step=len(curve), loss=curve[-1][3], flags=flags,
                          frozen_hashes=frozen,
                          l_diff_ma_start=float(moving_average([r[1] for r in curve])[0]),
                          l_diff_ma_end=float(moving_average([r[1] for r in curve])[-1]))
        checkpoint.save(out / "unet", unet, unet.arch, meta)
        checkpoint.save(out / "tokenizer", tok, tok.arch, dict(meta, role="tokenizer"))
        return unet, tok, meta

    def diffusion_models(self, variant):
        sections = ("data", "autoencoder", "warp", "flatten", "diffusion")
        d = self.layout.diffusion(variant)
        unet, _ = self._load(d / "unet", f"diffusion UNet ({variant})", "train-diffusion",
                             unet_mod.build, sections)
        tok, _ = self._load(d / "tokenizer", f"tokenizer ({variant})", "train-diffusion",
                            unet_mod.build, sections)
        return unet, tok

    # --------------------------------------------------------------- sample
    def sampler_config(self, **over):
        s = self.cfg.sampler
        freeu = FreeUFactors(s.b1, s.b2, s.s1, s.s2) if s.freeu else None
        base = SamplerConfig(steps=s.steps, init_mode=s.init_mode, guidance_scale=s.guidance_scale,
                             freeu=freeu, seed=self.cfg.seed)
        return replace(base, **over)

    def _conditions(self, person_idx, garment_idx, ae, warp_net):
        with flush_denormal():
            return conditioning.prepare_pairs(self.dataset().arrays, person_idx, garment_idx, ae, warp_net)

    def run_sampling(self, person_idx, garment_idx, variant, scfg, trace_dir=None, ids=None,
                     batch_size=50):
        ae = self.autoencoder()
        warp_net = self.flow_net("warp")
        unet, tok = self.diffusion_models(variant)
        sched = self.schedule()
        cond = self._conditions(person_idx, garment_idx, ae, warp_net)
        outs = []
        n = len(person_idx)
        with flush_denormal():
            for k in range(0, n, batch_size):
                part = {key: v[k:k + batch_size] for key, v in cond.items()}
                # one noise seed per batch position keeps results batch-size independent
                outs.append(torch.cat([
                    sample({key: v[j:j + 1] for key, v in part.items()}, ae, unet, tok, sched,
                           replace(scfg, seed=scfg.seed * 100003 + k + j),
                           trace_dir=trace_dir, ids=[ids[k + j]] if (trace_dir and ids) else None)
                    for j in range(part["C"].shape[0])]))
        return torch.cat(outs), cond

    def sample_pair(self, person, garment, variant=None, trace_dir=None, out_path=None, **over):
        """Single try-on.  ``person`` is a sample id or a sample directory;
        ``garment`` is a sample id or a flat-garment PNG."""
        ds = self.dataset()
        variant = variant or variant_name(vars(self.cfg.ablation))
        p_idx = self._resolve_person(person)
        arrays, g_idx = self._resolve_garment(garment)
        scfg = self.sampler_config(**over)
        if arrays is not ds.arrays:
            saved = ds.arrays
            ds.arrays = arrays
            try:
                img, _ = self.run_sampling([p_idx], [g_idx], variant, scfg, trace_dir, ids=["pair"])
            finally:
                ds.arrays = saved
        else:
            img, _ = self.run_sampling([p_idx], [g_idx], variant, scfg, trace_dir, ids=["pair"])
        arr = img[0].permute(1, 2, 0).numpy()
        if out_path is None:
            out_path = self.layout.samples / "single" / f"{Path(str(person)).name}__{Path(str(garment)).stem}.png"
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        io.save_png(out_path, arr)
        return Path(out_path)

    def _resolve_person(self, person):
        ds = self.dataset()
        key = str(person)
        if key in ds.index:
            return ds.index[key]
        name = Path(key).name
        if Path(key).is_dir() and name in ds.index:
            return ds.index[name]
        raise ValidationError(f"unknown person {person!r}: give a sample id or a sample directory "
                              "from the dataset (pose and try-on region are needed)")

    def _resolve_garment(self, garment):
        ds = self.dataset()
        key = str(garment)
        if key in ds.index:
            return ds.arrays, ds.index[key]
        p = Path(key)
        if p.is_file():
            img = io.load_png(p)[..., :3]
            canvas = tuple(ds.manifest.canvas)
            if img.shape[:2] != canvas:
                raise ValidationError(f"garment image must be {canvas[0]}x{canvas[1]}")
            m_cp = kernels.raster_polygon(synthgen.garment_template(canvas), canvas).astype(np.float32)
            arrays = dict(ds.arrays)
            arrays["C"] = np.concatenate([ds.arrays["C"], (img * m_cp[..., None])[None]])
            arrays["m_cp"] = np.concatenate([ds.arrays["m_cp"], m_cp[None]])
            return arrays, len(arrays["C"]) - 1
        raise ValidationError(f"unknown garment {garment!r}: give a sample id or a PNG path")

    # ----------------------------------------------------------------- eval
    def _test_lists(self, setting):
        ds = self.dataset()
        if setting == "paired":
            idx = ds.split_indices("test")
            pi, gi = list(idx), list(idx)
        elif setting == "unpaired":
            pairs = ds.split_indices("unpaired")
            pi, gi = [p for p, _ in pairs], [g for _, g in pairs]
        else:
            raise ValidationError(f"unknown setting {setting!r}; expected paired or unpaired")
        m = self.cfg.eval.max_samples
        if m is not None:
            pi, gi = pi[:m], gi[:m]
        return pi, gi

    def evaluate(self, setting, variant=None, init_mode=None, tag=None, save_images=True):
        ds = self.dataset()
        variant = variant or variant_name(vars(self.cfg.ablation))
        scfg = self.sampler_config(**({"init_mode": init_mode} if init_mode else {}))
        pi, gi = self._test_lists(setting)
        pred, cond = self.run_sampling(pi, gi, variant, scfg)
        ae = self.autoencoder()
        flatten_net = self.flow_net("flatten")
        ids = [ds.ids[k] for k in pi]
        gids = [ds.ids[k] for k in gi]
        with flush_denormal():
            rows = evalmetrics.score_pairs(pred, cond, cond.get("T") if setting == "paired" else None,
                                           flatten_net, ids, gids)
        # fidelity to the warped garment on the region where it is pasted
        paste = cond["m_w"] * cond["m"]
        for k, row in enumerate(rows):
            mask = paste[k, 0].numpy() > 0.5
            row["l1_to_warped"] = (evalmetrics.masked_l1(pred[k].permute(1, 2, 0).numpy(),
                                                         cond["C_w"][k].permute(1, 2, 0).numpy(), mask)
                                   if mask.any() else float("nan"))
        real = ds["T"][np.asarray(pi)]
        fake = pred.permute(0, 2, 3, 1).numpy()
        with flush_denormal():
            frechet = evalmetrics.frechet_proxy(evalmetrics.pooled_features(real, ae),
                                                evalmetrics.pooled_features(fake, ae))
        fp = evalmetrics.fingerprint({"config": self.cfg.to_dict(), "variant": variant,
                                      "init_mode": scfg.init_mode, "setting": setting})
        report = evalmetrics.build_report(setting, rows, frechet, fp)
        report["variant"] = variant
        report["init_mode"] = scfg.init_mode
        report["aggregates"]["mean_l1_to_warped"] = float(np.nanmean([r["l1_to_warped"] for r in rows]))
        tag = tag or f"{variant}_{scfg.init_mode}"
        evalmetrics.write_report(report, self.layout.reports / tag, f"report_{setting}")
        if save_images:
            d = self.layout.samples / tag / setting
            d.mkdir(parents=True, exist_ok=True)
            for sid, gid, img in zip(ids, gids, fake):
                io.save_png(d / f"{sid}__{gid}.png", img)
        return report

    # --------------------------------------------------------------- ablate
    def ablate(self, lattice=ABLATION_LATTICE):
        """Train each distinct flag set once, evaluate every lattice row in both
        settings and write a merged comparison table."""
        trained = set()
        summary = []
        for name, flags, init in lattice:
            full = dict(vars(self.cfg.ablation), **flags)
            variant = variant_name(full)
            if variant not in trained:
                self.train_diffusion(full)
                trained.add(variant)
            paired = self.evaluate("paired", variant, init, tag=name)
            unpaired = self.evaluate("unpaired", variant, init, tag=name)
            summary.append({
                "row": name, "variant": variant, "init_mode": init,
                "paired_ssim": paired["aggregates"]["mean_ssim"],
                "paired_masked_l1": paired["aggregates"]["mean_masked_l1"],
                "paired_consistency": paired["aggregates"]["mean_consistency"],
                "unpaired_frechet_proxy": unpaired["aggregates"]["frechet_proxy"],
                "unpaired_consistency": unpaired["aggregates"]["mean_consistency"],
                "unpaired_l1_to_warped": unpaired["aggregates"]["mean_l1_to_warped"],
            })
        out = self.layout.reports / "ablation"
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "comparison.json", {"rows": summary, "config_fingerprint": self.cfg.fingerprint()})
        cols = list(summary[0])
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in summary:
                w.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in cols])
        return summary
