"""Experiment orchestration: per-stage training, sampling and evaluation for one run."""

import logging
import math
import os
import random
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

import config
from delay_schedule import delayed_length
from evaluator import EvaluatorConfig, RetrievalEvaluator, embed_all, train_evaluator
from generators import (FLOW_PARADIGMS, TOKEN_PARADIGMS, GeneratorConfig, build_generator,
                        free_running_error_rate, teacher_forced_error_rate)
from kinematics import GlobalMotion, SkeletonConfig, load_motion, load_motion_csv, save_motion, to_headcentric
from metrics import MetricReport, evaluate_motions
from motion_vae import MotionVae, VaeConfig
from reasoner import BundleBatch, Reasoner, ReasonerConfig, ablate_condition, freeze
from run_config import RunConfig
from run_recorder import RunRecorder, weights_hash
from rvq_tokenizer import RvqConfig, RvqVae, save_tokens
from synthdata import (MANIFEST_NAME, FeatureNormalizer, MotionTensors, build_dataset, decode_features,
                       load_dataset, to_tensors)

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

# per-stage seed offsets so stages run alone reproduce the full pipeline
STAGE_SEEDS = {"rvq": 1, "vae": 2, "stage1": 3, "stage2": 4, "evaluator": 5, "sample": 6}
CHUNK = 64


class FrozenContractError(RuntimeError):
    """Reasoner weights changed when they must not, or stayed put under joint tuning."""


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _chunked(fn: Callable[[slice], torch.Tensor], n: int, chunk: int = CHUNK) -> torch.Tensor:
    return torch.cat([fn(slice(i, min(i + chunk, n))) for i in range(0, n, chunk)])


def read_motion_file(path: str, skel: SkeletonConfig) -> GlobalMotion:
    if path.endswith(".csv"):
        return load_motion_csv(path, head_joint=skel.head_joint)
    return load_motion(path, head_joint=skel.head_joint)


class ExperimentRunner:
    """Runs the stages of one configured experiment against its checkpoint directory."""

    def __init__(self, cfg: RunConfig, recorder: Optional[RunRecorder] = None):
        self.cfg = cfg.validate()
        self.device = torch.device(cfg.device)
        self.recorder = recorder or RunRecorder(cfg.experiment_root, cfg.name)
        self.skel = SkeletonConfig.from_name(cfg.dataset["skeleton"])
        self.dataset = None
        self.normalizer: Optional[FeatureNormalizer] = None
        self.train: Optional[MotionTensors] = None
        self.test: Optional[MotionTensors] = None
        self.training_seconds: Dict[str, float] = {}

    # --- data ---

    def dataset_dir(self) -> str:
        ds = self.cfg.dataset
        if ds["path"]:
            return ds["path"]
        name = f"synthetic-{ds['num_samples']}-{ds['seed']}-{ds['skeleton']}"
        return os.path.join(self.cfg.experiment_root, "data", name)

    def prepare_data(self):
        """Load the dataset (generating it if absent) and build normalized tensors."""
        if self.train is not None:
            return self.dataset
        directory = self.dataset_dir()
        ds = self.cfg.dataset
        if not os.path.exists(os.path.join(directory, MANIFEST_NAME)):
            build_dataset(ds["num_samples"], ds["seed"], ds["skeleton"], out_dir=directory, workers=ds["workers"])
        # fresh and resumed runs both read the stored float32 files
        self.dataset = load_dataset(directory)
        self.normalizer = FeatureNormalizer.fit(self.dataset.features("train"))
        self.recorder.save_artifact("normalizer.json", self.normalizer.to_dict())
        self.train = to_tensors(self.dataset, "train", self.normalizer).to(self.device)
        self.test = to_tensors(self.dataset, "test", self.normalizer).to(self.device)
        logger.info(f"Data ready: {len(self.train)} train / {len(self.test)} test from {directory}")
        return self.dataset

    @property
    def num_frames(self) -> int:
        return self.train.features.shape[1]

    @property
    def num_steps(self) -> int:
        """Token timesteps N1 for the RVQ codec."""
        return math.ceil(self.num_frames / int(self.cfg.rvq["temporal_downsample"]))

    @property
    def latent_steps(self) -> int:
        """VAE latent timesteps; fm_latent samples at this length."""
        return math.ceil(self.num_frames / int(self.cfg.vae["temporal_downsample"]))

    def _index_generator(self, stage: str) -> torch.Generator:
        return torch.Generator().manual_seed(self.cfg.seed * 100 + STAGE_SEEDS[stage])

    def _begin(self, stage: str) -> torch.Generator:
        seed_everything(self.cfg.seed * 100 + STAGE_SEEDS[stage])
        self.prepare_data()
        return self._index_generator(stage)

    # --- model factories ---

    def build_rvq(self) -> RvqVae:
        return RvqVae(self.skel.feature_dim, RvqConfig(**self.cfg.rvq)).to(self.device)

    def build_vae(self) -> MotionVae:
        return MotionVae(self.skel.feature_dim, VaeConfig(**self.cfg.vae)).to(self.device)

    def reasoner_config(self) -> ReasonerConfig:
        levels = int(self.cfg.rvq["levels"])
        return ReasonerConfig(
            codebook_size=int(self.cfg.rvq["codebook_size"]), levels=levels,
            feature_dim=self.skel.feature_dim, max_motion_steps=delayed_length(levels, self.num_steps),
            **self.cfg.reasoner)

    def build_reasoner(self) -> Reasoner:
        return Reasoner(self.reasoner_config()).to(self.device)

    def generator_config(self) -> GeneratorConfig:
        paradigm = self.cfg.paradigm
        input_dim = self.skel.feature_dim if paradigm == "fm_raw" else int(self.cfg.vae["latent_dim"])
        return GeneratorConfig(
            paradigm=paradigm, codebook_size=int(self.cfg.rvq["codebook_size"]),
            levels=int(self.cfg.rvq["levels"]), input_dim=input_dim,
            context_dim=int(self.cfg.reasoner["model_dim"]),
            max_len=self.num_frames + int(self.cfg.rvq["levels"]), **self.cfg.generator)

    def build_evaluator(self) -> RetrievalEvaluator:
        cfg = EvaluatorConfig(feature_dim=self.skel.feature_dim, max_frames=self.num_frames, **self.cfg.evaluator)
        return RetrievalEvaluator(cfg).to(self.device)

    def _restore(self, kind: str, factory: Callable[[Dict], nn.Module]) -> Tuple[nn.Module, Dict]:
        payload = self.recorder.load_checkpoint(kind, map_location=str(self.device))
        module = factory(payload["config"]).to(self.device)
        module.load_state_dict(payload["state_dict"])
        return module.eval(), payload

    def load_rvq(self) -> RvqVae:
        return self._restore("rvq", lambda c: RvqVae(self.skel.feature_dim, RvqConfig(**c)))[0]

    def load_vae(self) -> MotionVae:
        return self._restore("vae", lambda c: MotionVae(self.skel.feature_dim, VaeConfig(**c)))[0]

    def load_reasoner(self, kind: str = "stage1") -> Reasoner:
        return self._restore(kind, lambda c: Reasoner(ReasonerConfig(**c)))[0]

    def load_generator(self):
        return self._restore("stage2", lambda c: build_generator(GeneratorConfig(**c)))

    def load_evaluator(self) -> RetrievalEvaluator:
        return self._restore("evaluator", lambda c: RetrievalEvaluator(EvaluatorConfig(**c)))[0]

    def _codec_input(self, kind: str, motion: GlobalMotion) -> Tuple[torch.Tensor, FeatureNormalizer, Dict]:
        """Normalized (1, N, C) features using the normalizer stored with a codec checkpoint."""
        payload = self.recorder.load_checkpoint(kind, map_location=str(self.device))
        normalizer = FeatureNormalizer.from_dict(payload["normalizer"])
        features = normalizer.normalize(to_headcentric(motion, self.skel).features).astype(np.float32)
        return torch.from_numpy(features)[None].to(self.device), normalizer, payload

    @torch.no_grad()
    def tokenize_motion(self, motion_path: str, out_path: str) -> np.ndarray:
        """Motion file -> (L, N1) token grid file."""
        rvq = self.load_rvq()
        x, _, _ = self._codec_input("rvq", read_motion_file(motion_path, self.skel))
        tokens = rvq.tokenize(x)[0].cpu().numpy()
        save_tokens(out_path, tokens, rvq.cfg.codebook_size)
        logger.info(f"Tokenized {motion_path}: {tokens.shape[0]} levels x {tokens.shape[1]} steps -> {out_path}")
        return tokens

    @torch.no_grad()
    def vae_roundtrip(self, motion_path: str) -> Dict[str, float]:
        """Reconstruction error of a motion file through the posterior mean."""
        vae = self.load_vae()
        motion = read_motion_file(motion_path, self.skel)
        x, normalizer, _ = self._codec_input("vae", motion)
        x_hat = vae.decode(vae.latents(x, sample=False))[:, :x.shape[1]]
        head = self.skel.head_joint
        rebuilt = decode_features(x_hat, normalizer, motion.positions[:1, head].astype(np.float64),
                                  motion.heading[:1].astype(np.float64), self.skel)[0]
        joint_error = np.linalg.norm(rebuilt.positions - motion.positions.astype(np.float64), axis=-1)
        return {
            "frames": motion.num_frames,
            "feature_mse": float(((x_hat - x) ** 2).mean()),
            "mean_joint_error_m": float(joint_error.mean()),
            "max_joint_error_m": float(joint_error.max()),
        }

    # --- training ---

    def _fit(self, name: str, params: List[nn.Parameter], loss_fn: Callable[[torch.Tensor], torch.Tensor],
             steps: int, lr: float, cosine: bool, generator: torch.Generator) -> Dict:
        """AdamW loop over random minibatches; cosine decay for codecs, constant otherwise."""
        optim_cfg = self.cfg.optim
        optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=optim_cfg["weight_decay"])
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=steps) if cosine else None
        n = len(self.train)
        batch_size = min(int(optim_cfg["batch_size"]), n)
        log_every = int(optim_cfg["log_every"])
        history = []
        start = time.perf_counter()
        for step in tqdm(range(steps), desc=name, disable=not config.SHOW_PROGRESS):
            idx = torch.randperm(n, generator=generator)[:batch_size].to(self.device)
            loss = loss_fn(idx)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            history.append(loss.item())
            if log_every and (step + 1) % log_every == 0:
                logger.info(f"{name} step {step + 1}/{steps} loss {history[-1]:.4f}")
        seconds = time.perf_counter() - start
        self.training_seconds[name] = seconds
        return {"loss_history": history, "final_loss": history[-1] if history else float("nan"),
                "seconds": seconds}

    def train_rvq(self) -> Dict:
        generator = self._begin("rvq")
        model = self.build_rvq().train()
        model.quantizer.generator = generator
        features = self.train.features
        result = self._fit("rvq", list(model.parameters()), lambda idx: model(features[idx])["loss"],
                           int(self.cfg.optim["codec_steps"]), float(self.cfg.optim["codec_lr"]), True, generator)
        model.eval()
        result["usage"] = model.quantizer.usage()
        result["checkpoint"] = self.recorder.save_checkpoint(
            "rvq", model, model.cfg.to_dict(), {"normalizer": self.normalizer.to_dict()})
        return result

    def train_vae(self) -> Dict:
        generator = self._begin("vae")
        model = self.build_vae().train()
        features = self.train.features
        result = self._fit("vae", list(model.parameters()),
                           lambda idx: model(features[idx])["loss"],
                           int(self.cfg.optim["codec_steps"]), float(self.cfg.optim["codec_lr"]), True, generator)
        model.eval()
        result["checkpoint"] = self.recorder.save_checkpoint(
            "vae", model, model.cfg.to_dict(), {"normalizer": self.normalizer.to_dict()})
        return result

    @torch.no_grad()
    def tokens(self, rvq: RvqVae, features: torch.Tensor) -> torch.Tensor:
        return _chunked(lambda s: rvq.tokenize(features[s]), len(features))

    def _conditions(self, tensors: MotionTensors) -> BundleBatch:
        return ablate_condition(tensors.conditions, self.cfg.condition_mode)

    def train_stage1(self) -> Dict:
        generator = self._begin("stage1")
        tokens = self.tokens(self.load_rvq(), self.train.features)
        conditions = self._conditions(self.train)
        reasoner = self.build_reasoner().train()
        result = self._fit("stage1", list(reasoner.parameters()),
                           lambda idx: reasoner.loss(conditions.select(idx), tokens[idx]),
                           int(self.cfg.optim["stage1_steps"]), float(self.cfg.optim["stage_lr"]), False, generator)
        reasoner.eval()
        result["checkpoint"] = self.recorder.save_checkpoint("stage1", reasoner, reasoner.cfg.to_dict())
        return result

    @torch.no_grad()
    def hidden_states(self, reasoner: Reasoner, conditions: BundleBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """Reasoner condition states for a whole split, computed in chunks."""
        idx = torch.arange(len(conditions), device=self.device)
        parts = [reasoner.extract_hidden(conditions.select(idx[i:i + CHUNK]))
                 for i in range(0, len(conditions), CHUNK)]
        return torch.cat([p[0] for p in parts]), torch.cat([p[1] for p in parts])

    def _stage2_target(self):
        """Returns (target_fn(idx), rvq, vae) for the configured paradigm."""
        paradigm = self.cfg.paradigm
        features = self.train.features
        if paradigm in TOKEN_PARADIGMS:
            rvq = self.load_rvq()
            tokens = self.tokens(rvq, features)
            return (lambda idx: tokens[idx]), rvq, None
        if paradigm == "fm_latent":
            vae = self.load_vae()
            if self.cfg.generator["sample_posterior"]:
                return (lambda idx: vae.latents(features[idx], sample=True)), None, vae
            means = _chunked(lambda s: vae.latents(features[s], sample=False), len(features))
            return (lambda idx: means[idx]), None, vae
        return (lambda idx: features[idx]), None, None

    def train_stage2(self) -> Dict:
        """Stage II under the configured vlm_mode, asserting the reasoner weight contract."""
        if self.cfg.paradigm == "stage1":
            raise FrozenContractError("The stage1 paradigm has no stage II to train")
        generator = self._begin("stage2")
        mode = self.cfg.vlm_mode
        reasoner = self.load_reasoner("stage1") if mode == "two_stage" else self.build_reasoner()
        conditions = self._conditions(self.train)
        target, rvq, vae = self._stage2_target()

        model = build_generator(self.generator_config()).to(self.device)
        if self.cfg.paradigm == "ar" and model.cfg.tie_embeddings:
            model.tie_embeddings(reasoner)
        if self.cfg.paradigm in FLOW_PARADIGMS:
            n = len(self.train)
            model.set_latent_scale(_chunked(lambda s: target(torch.arange(n, device=self.device)[s]), n))
        model.train()

        before = weights_hash(reasoner)
        if mode == "joint":
            reasoner.train()
            stage1_tokens = self.tokens(rvq or self.load_rvq(), self.train.features)
            weight = float(self.cfg.optim["joint_weight"])

            def loss_fn(idx):
                batch = conditions.select(idx)
                h, h_pad = reasoner.extract_hidden(batch)
                return (model.loss(target(idx), h, h_pad, generator=None)
                        + weight * reasoner.loss(batch, stage1_tokens[idx]))

            params = list(model.parameters()) + list(reasoner.parameters())
        else:
            freeze(reasoner)
            h_all, pad_all = self.hidden_states(reasoner, conditions)

            def loss_fn(idx):
                return model.loss(target(idx), h_all[idx], pad_all[idx], generator=None)

            params = list(model.parameters())

        result = self._fit("stage2", params, loss_fn, int(self.cfg.optim["stage2_steps"]),
                           float(self.cfg.optim["stage_lr"]), False, generator)
        after = weights_hash(reasoner)
        if mode in ("two_stage", "frozen") and after != before:
            raise FrozenContractError(f"Reasoner weights changed during stage II ({mode})")
        if mode == "joint" and after == before:
            raise FrozenContractError("Joint tuning left the reasoner weights unchanged")
        logger.info(f"Reasoner hash {before[:12]} -> {after[:12]} ({mode})")

        model.eval()
        reasoner.eval()
        result.update({"reasoner_hash_before": before, "reasoner_hash_after": after})
        self.recorder.save_checkpoint("stage2_reasoner", reasoner, reasoner.cfg.to_dict(), {"vlm_mode": mode})
        result["checkpoint"] = self.recorder.save_checkpoint(
            "stage2", model, model.cfg.to_dict(), {"vlm_mode": mode, "reasoner_hash": after})
        return result

    def train_retrieval_evaluator(self) -> Dict:
        generator = self._begin("evaluator")
        evaluator = self.build_evaluator()
        start = time.perf_counter()
        history = train_evaluator(evaluator, self.train.features, self.train.conditions,
                                  int(self.cfg.optim["evaluator_steps"]), float(self.cfg.optim["evaluator_lr"]),
                                  weight_decay=float(self.cfg.optim["weight_decay"]), generator=generator,
                                  log_every=int(self.cfg.optim["log_every"]))
        self.training_seconds["evaluator"] = time.perf_counter() - start
        path = self.recorder.save_checkpoint("evaluator", evaluator, evaluator.cfg.to_dict())
        return {"loss_history": history, "final_loss": history[-1] if history else float("nan"), "checkpoint": path}

    # --- sampling and evaluation ---

    def _sampler(self) -> Callable[[BundleBatch], torch.Tensor]:
        """Condition batch -> normalized features (B, N, C) for the configured paradigm."""
        paradigm = self.cfg.paradigm
        eval_cfg = self.cfg.eval
        N, N1 = self.num_frames, self.num_steps
        if paradigm == "stage1":
            reasoner, rvq = self.load_reasoner("stage1"), self.load_rvq()

            def sample(batch):
                tokens = reasoner.generate_tokens(batch, N1, eval_cfg["temperature"], eval_cfg["top_k"], None)
                return rvq.detokenize(tokens)[:, :N]
            return sample

        reasoner = self.load_reasoner("stage2_reasoner")
        model, _ = self.load_generator()
        rvq = self.load_rvq() if paradigm in TOKEN_PARADIGMS else None
        vae = self.load_vae() if paradigm == "fm_latent" else None

        @torch.no_grad()
        def sample(batch):
            h, h_pad = reasoner.extract_hidden(batch)
            if paradigm == "ar":
                tokens = model.generate(h, h_pad, N1, eval_cfg["temperature"], eval_cfg["top_k"])
                return rvq.detokenize(tokens)[:, :N]
            if paradigm == "masked":
                return rvq.detokenize(model.generate(h, h_pad, N1, temperature=eval_cfg["temperature"]))[:, :N]
            if paradigm == "fm_raw":
                return model.generate(h, h_pad, N)
            return vae.decode(model.generate(h, h_pad, self.latent_steps))[:, :N]
        return sample

    @torch.no_grad()
    def sample(self, split: str = "test") -> Dict:
        """Generate motions for a split's conditions; latency is ms per sample at batch size 1."""
        self._begin("sample")
        tensors = self.test if split == "test" else self.train
        limit = self.cfg.eval["max_samples"]
        n = len(tensors) if not limit else min(int(limit), len(tensors))
        conditions = self._conditions(tensors)
        sampler = self._sampler()
        idx = torch.arange(n, device=self.device)
        features = _chunked(lambda s: sampler(conditions.select(idx[s])), n)

        timings = []
        for i in range(min(int(self.cfg.eval["latency_samples"]), n)):
            start = time.perf_counter()
            sampler(conditions.select(idx[i:i + 1]))
            timings.append((time.perf_counter() - start) * 1000.0)
        motions = decode_features(features, self.normalizer, tensors.init_head[:n], tensors.init_heading[:n],
                                  self.skel)
        return {"features": features, "motions": motions, "count": n,
                "sample_ids": tensors.sample_ids[:n],
                "latency_ms": float(np.mean(timings)) if timings else 0.0}

    def save_samples(self, samples: Dict, out_dir: Optional[str] = None) -> List[str]:
        """Write generated motions as motion files named by their condition's sample id."""
        out_dir = out_dir or self.recorder.artifact_path("samples")
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for sample_id, motion in zip(samples["sample_ids"], samples["motions"]):
            path = os.path.join(out_dir, f"{sample_id}.egom")
            save_motion(path, motion)
            paths.append(path)
        logger.info(f"Wrote {len(paths)} generated motions to {out_dir}")
        return paths

    @torch.no_grad()
    def evaluate(self, samples: Dict) -> MetricReport:
        evaluator = self.load_evaluator()
        n = samples["count"]
        generated = embed_all(evaluator, features=samples["features"])["motion"]
        reference = embed_all(evaluator, features=self.test.features)["motion"]
        conditions = embed_all(evaluator, conditions=self.test.conditions.select(
            torch.arange(n, device=self.device)))["condition"]
        report = evaluate_motions(samples["motions"], self.skel, generated, reference, conditions,
                                  batch=int(self.cfg.eval["retrieval_batch"]), seed=self.cfg.seed)
        logger.info(f"Evaluation: {report.to_dict()}")
        return report

    @torch.no_grad()
    def exposure_bias(self, limit: int = 16) -> Dict[str, float]:
        """Teacher-forced vs free-running token error for the AR paradigm on test samples."""
        if self.cfg.paradigm != "ar":
            return {}
        reasoner = self.load_reasoner("stage2_reasoner")
        model, _ = self.load_generator()
        rvq = self.load_rvq()
        n = min(limit, len(self.test))
        idx = torch.arange(n, device=self.device)
        tokens = rvq.tokenize(self.test.features[:n])
        h, h_pad = reasoner.extract_hidden(self._conditions(self.test).select(idx))
        return {"teacher_forced_error": teacher_forced_error_rate(model, tokens, h, h_pad),
                "free_running_error": free_running_error_rate(model, tokens, h, h_pad)}

    # --- orchestration ---

    def stages(self) -> List[str]:
        """Training stages needed by the configured variant, in order."""
        paradigm, mode = self.cfg.paradigm, self.cfg.vlm_mode
        # stage-I objectives need tokens, so only frozen flow variants skip the RVQ codec
        needs_tokens = paradigm in TOKEN_PARADIGMS + ("stage1",) or mode != "frozen"
        order = ["rvq"] if needs_tokens else []
        if paradigm == "fm_latent":
            order.append("vae")
        if mode == "two_stage":
            order.append("stage1")
        if paradigm != "stage1":
            order.append("stage2")
        order.append("evaluator")
        return order

    def run_stage(self, stage: str) -> Dict:
        handlers = {
            "rvq": self.train_rvq,
            "vae": self.train_vae,
            "stage1": self.train_stage1,
            "stage2": self.train_stage2,
            "evaluator": self.train_retrieval_evaluator,
        }
        if stage not in handlers:
            raise ValueError(f"Unknown stage '{stage}'")
        return handlers[stage]()

    def run(self) -> Dict:
        """Train what the configured stage needs, then sample and evaluate; records the run."""
        self.prepare_data()
        stage = self.cfg.stage
        results: Dict[str, Dict] = {}
        if stage == "data":
            return {"dataset": self.dataset_dir()}
        stages = self.stages() if stage == "all" else ([] if stage == "eval" else [stage])
        for name in stages:
            logger.info(f"Running stage {name}")
            results[name] = self.run_stage(name)
        if stage not in ("all", "eval"):
            return {"stages": results, "checkpoints": self.recorder.checkpoint_hashes()}

        samples = self.sample("test")
        report = self.evaluate(samples)
        extra = self.exposure_bias()
        report_path = self.recorder.artifact_path("report.json")
        report.to_json(report_path)
        run_id = self.recorder.save_run({
            "paradigm": self.cfg.paradigm,
            "vlm_mode": self.cfg.vlm_mode,
            "condition_mode": self.cfg.condition_mode,
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "report": report.to_dict(),
            "latency_ms": samples["latency_ms"],
            "training_seconds": dict(self.training_seconds),
            "extra": extra,
        })
        return {
            "run_id": run_id,
            "report": report,
            "report_path": report_path,
            "latency_ms": samples["latency_ms"],
            "stages": {k: {key: v for key, v in r.items() if key != "loss_history"} for k, r in results.items()},
            "loss_histories": {k: r.get("loss_history", []) for k, r in results.items()},
            "checkpoints": self.recorder.checkpoint_hashes(),
            "motions": samples["motions"],
            "extra": extra,
        }


def run(cfg: RunConfig, recorder: Optional[RunRecorder] = None) -> Dict:
    return ExperimentRunner(cfg, recorder).run()
