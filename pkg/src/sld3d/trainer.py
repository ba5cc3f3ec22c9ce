"""Three-stage training: patch-discrimination pretraining, shape-guided
clustering with an EMA teacher, and pseudo-label refinement.

Every stage starts from checkpoint bytes plus the config and writes
``<out>/last`` (full resumable state) and, for the later stages, ``<out>/best``.
"""
from __future__ import annotations

import base64
import copy
import io
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from .config import STAGES, TrainConfig
from .data import DatasetReader
from .ema import EmaTeacher, lambda_con, loss_consistency
from .evaluate import evaluate_model, predictor_for
from .fields import _atomic_write, write_volume
from .network import Discriminator, DiscriminatorConfig, SLDNet
from .orientation import apply_orientation, sample_orientation
from .refine import build_labels, ensemble_predict, loss_rr
from .region import loss_3drd, loss_entropy, loss_hypersphere_mixup, loss_patch_discrimination, mixup_inputs
from .shape import loss_adversarial, loss_discriminator, prediction_mips, reference_batch

log = logging.getLogger(__name__)

TERMS = ("pd", "hm", "rd", "adv", "con", "e")


class NonFiniteLossError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# checkpoints


def _torch_state_b64(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode()


def _torch_state_from_b64(s: str) -> torch.Tensor:
    return torch.frombuffer(bytearray(base64.b64decode(s)), dtype=torch.uint8).clone()


def save_checkpoint(path, state: dict, manifest: dict):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    _atomic_write(path / "weights.pt", buf.getvalue())
    _atomic_write(path / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if (path / "last").is_dir() and not (path / "weights.pt").exists():
        path = path / "last"
    manifest = json.loads((path / "manifest.json").read_text())
    state = torch.load(path / "weights.pt", weights_only=False)
    return state, manifest


def load_model(path) -> SLDNet:
    """Student network from a checkpoint directory (stage dir, ``best`` or ``last``)."""
    state, manifest = load_checkpoint(path)
    cfg = TrainConfig.from_dict(manifest["config"])
    model = SLDNet(cfg.backbone)
    model.load_state_dict(state["student"])
    model.eval()
    return model


def stage_seed(seed: int, stage: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, STAGES.index(stage)])


# ---------------------------------------------------------------------------


class StageRunner:
    """Holds all mutable training state for one stage."""

    def __init__(self, stage: str, cfg: TrainConfig, data_root, out_dir, init=None, resume=None,
                 dump_pseudo: bool = False):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.stage, self.cfg = stage, cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.dump_pseudo = dump_pseudo
        self.reader = DatasetReader(data_root, label_splits=("val",))
        self.train_ids = self.reader.ids("train")
        if not self.train_ids:
            raise ValueError("dataset has no training volumes")
        self.train_vols = [self.reader.volume(v).data for v in self.train_ids]
        for vid, vol in zip(self.train_ids, self.train_vols):
            if min(vol.shape) < cfg.crop_size:
                raise ValueError(f"{vid} {vol.shape} is smaller than the {cfg.crop_size}^3 crop")
        self.refs = self.reader.references(cfg.ref_dir, cfg.single_ref) if stage == "sld" else []

        seq = stage_seed(cfg.seed, stage)
        torch_seed, model_seed = (int(x) for x in seq.generate_state(2))
        torch.manual_seed(torch_seed)
        self.rng = np.random.default_rng(seq.spawn(1)[0])
        self.student = SLDNet(cfg.backbone, seed=model_seed)
        self.disc = Discriminator(DiscriminatorConfig(input_size=cfg.crop_overlap.output_size))
        self.ema: EmaTeacher | None = None
        self.best_model: SLDNet | None = None
        self.epoch = 0
        self.step = 0
        self.best_dsc = -math.inf
        self.history: list[dict] = []

        if init is not None:
            state, _ = load_checkpoint(init)
            self.student.load_state_dict(state["student"])
        if stage == "sld":
            self.ema = EmaTeacher(self.student, cfg.steps_per_epoch)
        self.opt = torch.optim.Adam(self.student.parameters(), lr=cfg.lr)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr)
        if stage == "refine":
            self.best_model = copy.deepcopy(self.student).eval()
        if resume is not None:
            self._restore(resume)
        elif stage == "refine":
            # the incoming model is the first "historical best"
            self.best_dsc = self.validate(self.student)
            self._save("best")
        self.log_path = self.out / "log.jsonl"
        if resume is None and self.log_path.exists():
            self.log_path.unlink()

    # -- state -----------------------------------------------------------------

    def _state(self) -> dict:
        st = {"student": self.student.state_dict(), "opt": self.opt.state_dict(),
              "disc": self.disc.state_dict(), "opt_d": self.opt_d.state_dict(),
              "torch_rng": torch.get_rng_state()}
        if self.ema is not None:
            st["ema"] = self.ema.state_dict()
        if self.best_model is not None:
            st["best_model"] = self.best_model.state_dict()
        return st

    def _manifest(self, kind: str) -> dict:
        return {"stage": self.stage, "kind": kind, "epoch": self.epoch, "step": self.step,
                "config": self.cfg.to_dict(), "best_dsc": None if self.best_dsc == -math.inf else self.best_dsc,
                "history": self.history,
                "rng": {"numpy": self.rng.bit_generator.state,
                        "ori_cnn": _torch_state_b64(self.student.generator)}}

    def _save(self, kind: str, model: SLDNet | None = None):
        if kind == "best":
            save_checkpoint(self.out / "best", {"student": (model or self.student).state_dict()},
                            self._manifest("best"))
        else:
            save_checkpoint(self.out / "last", self._state(), self._manifest("last"))

    def _restore(self, path):
        state, manifest = load_checkpoint(path)
        if manifest["stage"] != self.stage:
            raise ValueError(f"cannot resume stage {self.stage!r} from a {manifest['stage']!r} checkpoint")
        self.student.load_state_dict(state["student"])
        self.opt.load_state_dict(state["opt"])
        self.disc.load_state_dict(state["disc"])
        self.opt_d.load_state_dict(state["opt_d"])
        torch.set_rng_state(state["torch_rng"])
        if "ema" in state and self.ema is not None:
            self.ema.load_state_dict(state["ema"])
        if "best_model" in state and self.best_model is not None:
            self.best_model.load_state_dict(state["best_model"])
        self.rng.bit_generator.state = manifest["rng"]["numpy"]
        self.student.generator.set_state(_torch_state_from_b64(manifest["rng"]["ori_cnn"]))
        self.epoch, self.step = manifest["epoch"], manifest["step"]
        self.best_dsc = -math.inf if manifest["best_dsc"] is None else manifest["best_dsc"]
        self.history = manifest["history"]

    # -- data --------------------------------------------------------------------

    def _crop_box(self, shape):
        c = self.cfg.crop_size
        return tuple(slice(s0, s0 + c) for s0 in (int(self.rng.integers(0, s - c + 1)) for s in shape))

    def sample_crops(self, n: int, extra=None):
        """``n`` random crops; with ``extra`` (list of per-volume arrays) the same boxes are cut from those too."""
        crops, extras = [], []
        for _ in range(n):
            k = int(self.rng.integers(len(self.train_vols)))
            box = self._crop_box(self.train_vols[k].shape)
            crops.append(self.train_vols[k][box])
            if extra is not None:
                extras.append([e[k][box] for e in extra])
        x = torch.from_numpy(np.stack(crops)[:, None].astype(np.float32))
        return x, extras

    def make_view(self, crop: torch.Tensor):
        """Intensity-jittered, noisy, reoriented copy of a (1, c, c, c) crop."""
        cfg = self.cfg
        scale = float(self.rng.uniform(*cfg.view_jitter))
        noise = torch.from_numpy(self.rng.normal(0, cfg.view_noise, crop.shape).astype(np.float32))
        g = sample_orientation(self.rng, crop.shape)
        return apply_orientation((crop * scale + noise).clamp(0, 1), g).contiguous(), g

    def sample_batch(self) -> dict:
        cfg = self.cfg
        crops, _ = self.sample_crops(cfg.crops_per_batch)
        pairs = [tuple(self.rng.choice(cfg.crops_per_batch, 2, replace=False)) for _ in range(cfg.mixup_per_batch)]
        lam = torch.tensor(self.rng.beta(1.0, 1.0, cfg.mixup_per_batch), dtype=torch.float32)
        ia = [int(a) for a, _ in pairs]
        ib = [int(b) for _, b in pairs]
        mix = mixup_inputs(crops[ia], crops[ib], lam) if pairs else crops[:0]
        views, gs = zip(*(self.make_view(c) for c in crops))
        return {"crops": crops, "mix": mix, "ia": ia, "ib": ib, "lam": lam,
                "views": torch.stack(views), "view_g": gs}

    # -- losses ------------------------------------------------------------------

    def pretrain_terms(self, batch: dict, v: torch.Tensor) -> dict:
        cfg = self.cfg
        n, nm = batch["crops"].shape[0], batch["mix"].shape[0]
        v_crop, v_mix, v_view = v[:n], v[n:n + nm], v[n + nm:]
        restored = torch.stack([apply_orientation(v_view[i], g.inverse()) for i, g in enumerate(batch["view_g"])])
        terms = {"pd": loss_patch_discrimination(v_crop, restored, cfg.tau, cfg.patch_grid)}
        if nm:
            terms["hm"] = loss_hypersphere_mixup(v_mix, v_crop[batch["ia"]], v_crop[batch["ib"]], batch["lam"],
                                                 cfg.patch_grid)
        else:
            terms["hm"] = v.new_zeros(())
        return terms

    def weighted_total(self, terms: dict, lam: float) -> torch.Tensor:
        w = self.cfg.weights
        coef = {"pd": w.pd, "hm": w.hm, "rd": w.rd, "adv": w.adv, "con": lam, "e": w.e}
        return sum(coef[k] * terms[k] for k in terms)

    # -- steps -------------------------------------------------------------------

    def _check_finite(self, value: torch.Tensor):
        if not torch.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite loss at {self.stage} epoch {self.epoch} step {self.step}; "
                f"last good checkpoint: {self.out / 'last'}")

    def pretrain_step(self) -> dict:
        self.student.train()
        self.opt.zero_grad(set_to_none=True)
        nb = self.cfg.batches_per_iter
        sums = {"pd": 0.0, "hm": 0.0}
        for _ in range(nb):
            b = self.sample_batch()
            v, _ = self.student(torch.cat([b["crops"], b["mix"], b["views"]]))
            terms = self.pretrain_terms(b, v)
            total = terms["pd"] + terms["hm"]
            self._check_finite(total)
            (total / nb).backward()
            for k in sums:
                sums[k] += terms[k].item() / nb
        self.opt.step()
        return {"losses": sums, "total": sums["pd"] + sums["hm"]}

    def sld_step(self) -> dict:
        cfg = self.cfg
        t = cfg.backbone.t_index
        i = self.ema.step
        lam_c = lambda_con(i, cfg.steps_per_epoch) if cfg.use_con else 0.0
        refs = torch.from_numpy(reference_batch(self.refs, cfg.n_refs, cfg.crop_overlap, self.rng))[:, None]
        self.student.train()
        self.opt.zero_grad(set_to_none=True)
        self.disc.requires_grad_(False)
        nb = cfg.batches_per_iter
        sums = dict.fromkeys(TERMS, 0.0)
        fake = []
        for _ in range(nb):
            b = self.sample_batch()
            n = b["crops"].shape[0]
            v, m = self.student(torch.cat([b["crops"], b["mix"], b["views"]]))
            terms = self.pretrain_terms(b, v)
            m_crop = m[:n]
            vessel = m_crop[:, t]
            terms["rd"] = loss_3drd(v[:n], m_crop, cfg.tau)
            s = prediction_mips(vessel, cfg.crop_overlap.output_size)
            terms["adv"] = loss_adversarial(self.disc, s)
            if cfg.use_con:
                teacher = self.ema.predict(b["crops"])[1][:, t]
                terms["con"] = loss_consistency(vessel, teacher)
            else:
                terms["con"] = v.new_zeros(())
            terms["e"] = loss_entropy(m_crop)
            total = self.weighted_total(terms, lam_c)
            self._check_finite(total)
            (total / nb).backward()
            fake.append(s.detach())
            for k in TERMS:
                sums[k] += terms[k].item() / nb
        self.opt.step()
        self.disc.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        l_d = loss_discriminator(self.disc, refs, torch.cat(fake))
        self._check_finite(l_d)
        l_d.backward()
        self.opt_d.step()
        a = self.ema.update(self.student)
        total = sum(sums[k] * c for k, c in zip(TERMS, (cfg.weights.pd, cfg.weights.hm, cfg.weights.rd,
                                                            cfg.weights.adv, lam_c, cfg.weights.e)))
        return {"losses": sums, "total": total, "lambda": lam_c, "alpha": a, "ema_step": i,
                "disc": l_d.item()}

    def refine_step(self, pseudo) -> dict:
        cfg = self.cfg
        self.student.train()
        self.opt.zero_grad(set_to_none=True)
        nb = cfg.batches_per_iter
        total = 0.0
        for _ in range(nb):
            x, extra = self.sample_crops(cfg.crops_per_batch, [pseudo["labels"], pseudo["reliable"]])
            y = torch.from_numpy(np.stack([e[0] for e in extra]).astype(np.float32))
            q = torch.from_numpy(np.stack([e[1] for e in extra]).astype(np.float32))
            pred = self.student.vessel_probability(x)
            loss = loss_rr(pred, y, q)
            self._check_finite(loss)
            (loss / nb).backward()
            total += loss.item() / nb
        self.opt.step()
        return {"losses": {"rr": total}, "total": total}

    # -- epochs ------------------------------------------------------------------

    def validate(self, model) -> float:
        if not self.reader.ids("val"):
            return float("nan")
        rep = evaluate_model(model, self.reader, "val", self.cfg.crop_size, self.cfg.eval_threshold,
                             self.cfg.eval_overlap)
        vals = [m["dsc"] for m in rep.per_volume.values() if m["dsc"] is not None]
        return float(np.mean(vals)) if vals else 0.0

    def pseudo_labels(self) -> dict:
        cfg = self.cfg
        pred = predictor_for(self.best_model, cfg.crop_size, cfg.eval_overlap)
        out = {"labels": [], "reliable": [], "soft": []}
        for vid, vol in zip(self.train_ids, self.train_vols):
            soft = ensemble_predict(vol, pred, cfg.refinement, self.rng)
            pl = build_labels(soft, cfg.refinement.confidence)
            out["labels"].append(pl.labels)
            out["reliable"].append(pl.reliable)
            if self.dump_pseudo:
                d = self.out / "pseudo" / f"epoch_{self.epoch:03d}"
                write_volume(d / f"{vid}_soft", soft, id=f"{vid}_soft")
                write_volume(d / f"{vid}_label", pl.labels, id=f"{vid}_label")
                write_volume(d / f"{vid}_reliable", pl.reliable, id=f"{vid}_reliable")
        out["reliable_fraction"] = float(np.mean([r.mean() for r in out["reliable"]]))
        return out

    def _log(self, record: dict):
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def run_epoch(self):
        cfg = self.cfg
        t0 = time.time()
        pseudo = self.pseudo_labels() if self.stage == "refine" else None
        for _ in range(cfg.steps_per_epoch):
            if self.stage == "pretrain":
                rec = self.pretrain_step()
            elif self.stage == "sld":
                rec = self.sld_step()
            else:
                rec = self.refine_step(pseudo)
            rec.update(stage=self.stage, epoch=self.epoch, step=self.step)
            self._log(rec)
            self.step += 1
        summary = {"stage": self.stage, "epoch": self.epoch, "seconds": round(time.time() - t0, 3)}
        if pseudo is not None:
            summary["reliable_fraction"] = pseudo["reliable_fraction"]
        if self.stage != "pretrain":
            dsc = self.validate(self.student)
            summary["val_dsc"] = dsc
            if dsc > self.best_dsc:
                self.best_dsc = dsc
                self._save("best")
                if self.best_model is not None:
                    self.best_model.load_state_dict(self.student.state_dict())
        self.history.append(summary)
        self._log({"summary": summary})
        log.info("%s epoch %d: %s", self.stage, self.epoch, summary)
        self.epoch += 1
        self._save("last")
        return summary

    def run(self, epochs: int | None = None) -> Path:
        """Train until the configured epoch count (or ``epochs`` more epochs)."""
        target = self.cfg.epochs[self.stage] if epochs is None else self.epoch + epochs
        target = min(target, self.cfg.epochs[self.stage])
        while self.epoch < target:
            self.run_epoch()
        if not (self.out / "last").exists():
            self._save("last")
        if self.stage != "pretrain" and not (self.out / "best").exists():
            self._save("best")
        _atomic_write(self.out / "history.json", (json.dumps(self.history, indent=2) + "\n").encode())
        return self.out


def _resolve(init, prefer: str) -> Path:
    init = Path(init)
    return init / prefer if (init / prefer).is_dir() else init


def stage_pretrain(cfg: TrainConfig, data_root, out_dir, resume=None, epochs=None) -> Path:
    return StageRunner("pretrain", cfg, data_root, out_dir, resume=resume).run(epochs)


def stage_sld(cfg: TrainConfig, data_root, init, out_dir, resume=None, epochs=None) -> Path:
    """Shape-guided clustering, initialised from the pretrained weights."""
    return StageRunner("sld", cfg, data_root, out_dir, init=_resolve(init, "last"), resume=resume).run(epochs)


def stage_refine(cfg: TrainConfig, data_root, init, out_dir, resume=None, epochs=None,
                 dump_pseudo: bool = False) -> Path:
    """Pseudo-label refinement starting from the best shape-guided model."""
    return StageRunner("refine", cfg, data_root, out_dir, init=_resolve(init, "best"), resume=resume,
                       dump_pseudo=dump_pseudo).run(epochs)
