"""
Experiment Harness

Command-line entry point binding the modules into reproducible runs:
simulate, train, generate, evaluate, report, gradcheck and pipeline.

Every command resolves an INI config, works inside runs/<id>/ and records its
artifacts with SHA-256 hashes in the run manifest.
"""
import argparse
import configparser
import hashlib
import logging
import os
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from .baselines import (
    BcRnnModel,
    MaxEntModel,
    MmcModel,
    bc_rnn_generate,
    bc_rnn_train,
    maxent_generate,
    maxent_train,
    mmc_fit,
    mmc_generate,
)
from .data import Dataset, load_csv, longest_route, route_counts, save_csv, split
from .errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
    DatasetValidationError,
    ManifestError,
    NetworkLookupError,
    TrajLabError,
)
from .evaluation import (
    complexity_sensitivity,
    dataset_scores,
    distribution_report,
    link_transition_entropy,
    markdown_table,
    measure_throughput,
    write_distribution_csv,
    write_scores_csv,
)
from .models import (
    BcRnnConfig,
    DemandPattern,
    DemandSection,
    EvalSection,
    IoSection,
    MaxEntConfig,
    ModelSection,
    NetworkSection,
    RouteChoiceRule,
    RunConfig,
    RunManifest,
    TrainConfig,
    TrainSection,
)
from .network import (
    RoadNetwork,
    build_chain,
    build_grid,
    build_two_route,
    edge_list_text,
    enumerate_shortest_routes,
    network_from_edge_list,
    parse_edge_list,
)
from .nn import grad_check, load_checkpoint, no_grad, save_checkpoint
from .sim import generate_demand
from . import trajgail

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2

LOG_LEVELS = {
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
    "CRITICAL": logging.CRITICAL,
}

SECTIONS: Dict[str, type[BaseModel]] = {
    "network": NetworkSection,
    "demand": DemandSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "io": IoSection,
}

GRADCHECK_TOLERANCE = 1e-4


# ============================================================================
# LOGGING
# ============================================================================

def setup_logging(verbose: int = 0, log_dir: str = "logs") -> Path:
    """Stream plus file logging; level from LOG_LEVEL unless -v is given"""
    os.makedirs(log_dir, exist_ok=True)
    log_file = Path(log_dir) / f"trajlab_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
    level = LOG_LEVELS.get(os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO)
    if verbose:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(log_file, encoding="utf-8"),
            logging.StreamHandler(),
        ],
    )
    logging.getLogger().setLevel(level)
    logger.info(f"[CLI] Logging configured with level: {logging.getLevelName(level)}")
    return log_file


# ============================================================================
# CONFIGURATION
# ============================================================================

def _raw_value(value: str) -> Optional[str]:
    return None if value.strip().lower() in ("", "none") else value.strip()


def load_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """
    Read a flat INI config into a RunConfig.

    Raises:
        ConfigError: Unknown section, unknown key or invalid value (named section.key)
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"Malformed config {path}: {e}") from e

    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"Unknown config section [{name}]")
        values = {key: _raw_value(value) for key, value in parser.items(name)}
        try:
            sections[name] = SECTIONS[name](**values)
        except ValidationError as e:
            problems = "; ".join(
                f"{name}.{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
            )
            raise ConfigError(problems) from None

    config = RunConfig(**sections)
    if seed is not None:
        config.io.seed = seed
    if out is not None:
        config.io.out = out
    return config


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def resolved_text(config: RunConfig) -> str:
    """The fully resolved config in the same flat format"""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in getattr(config, name).model_dump().items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(resolved_text(config).encode("utf-8")).hexdigest()


def build_network(section: NetworkSection) -> RoadNetwork:
    if section.edge_list:
        return network_from_edge_list(section.edge_list)
    return build_grid(section.rows, section.cols, section.block_length, terminate_anywhere=section.terminate_anywhere)


def demand_from(section: DemandSection) -> Tuple[DemandPattern, RouteChoiceRule]:
    pattern = DemandPattern(kind=section.pattern, origin=section.origin, dest=section.dest,
                            major_flow_weight=section.major_flow_weight)
    rule = RouteChoiceRule(kind=section.rule, p=section.p, theta=section.theta, beta=section.beta, gamma=section.gamma)
    return pattern, rule


def train_config_from(config: RunConfig) -> TrainConfig:
    """TrainConfig from the scale preset plus explicit [train] keys"""
    section = config.train
    prefixed = {k for k in TrainSection.model_fields if k.startswith(("bc_", "maxent_"))}
    fields = section.model_dump(exclude={"scale"} | prefixed, exclude_none=True)
    fields["seed"] = config.io.seed
    if section.scale == "paper":
        return TrainConfig.paper(**fields)
    if section.scale == "multi_od":
        return TrainConfig.multi_od(**fields)
    return TrainConfig(**fields)


def bc_config_from(config: RunConfig) -> BcRnnConfig:
    t = config.train
    return BcRnnConfig(hidden_size=t.hidden_size, num_layers=t.num_layers, learning_rate=t.bc_learning_rate,
                       epochs=t.bc_epochs, batch_size=t.bc_batch_size, seed=config.io.seed, progress=t.progress)


def maxent_config_from(config: RunConfig) -> MaxEntConfig:
    t = config.train
    return MaxEntConfig(learning_rate=t.maxent_learning_rate, iterations=t.maxent_iterations,
                        tolerance=t.maxent_tolerance, horizon_factor=t.maxent_horizon_factor, seed=config.io.seed)


def worker_count(override: Optional[int]) -> int:
    if override is not None:
        return max(1, override)
    try:
        return max(1, int(os.getenv("TRAJLAB_WORKERS", "1")))
    except ValueError:
        raise ConfigError("TRAJLAB_WORKERS must be an integer") from None


# ============================================================================
# RUN DIRECTORY AND MANIFEST
# ============================================================================

def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class RunDirectory:
    """
    runs/<id>/{config.resolved, manifest.json, data/, ckpt/, reports/}

    Used as a context manager: takes the advisory lock, echoes the resolved
    config and writes the merged manifest on exit.
    """

    def __init__(self, config: RunConfig, command: str):
        self.config = config
        self.command = command
        self.hash = config_hash(config)
        run_id = config.io.run_id or f"{config.model.kind}-{config.demand.pattern}-{config.demand.rule}-{self.hash[:8]}"
        self.root = Path(config.io.out) / run_id
        self.run_id = run_id
        self.manifest: Optional[RunManifest] = None
        self._handler: Optional[logging.Handler] = None
        self._start = time.perf_counter()

    def path(self, group: str, name: str) -> Path:
        return self.root / group / name

    def __enter__(self) -> "RunDirectory":
        for group in ("data", "ckpt", "reports"):
            (self.root / group).mkdir(parents=True, exist_ok=True)
        try:
            with open(self.root / ".lock", "x", encoding="utf-8") as f:
                f.write(f"{os.getpid()} {self.command}\n")
        except FileExistsError:
            raise ManifestError(f"{self.root} is locked by another command (remove .lock if stale)") from None

        self._handler = logging.FileHandler(self.root / "run.log", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s"))
        logging.getLogger().addHandler(self._handler)

        (self.root / "config.resolved").write_text(resolved_text(self.config), encoding="utf-8")
        existing = self.root / "manifest.json"
        if existing.exists():
            self.manifest = RunManifest.model_validate_json(existing.read_text(encoding="utf-8"))
            self.manifest.command = self.command
            self.manifest.config_hash = self.hash
        else:
            self.manifest = RunManifest(run_id=self.run_id, command=self.command, config_hash=self.hash)
        self.manifest.labels.update({
            "network": f"{self.config.network.rows}x{self.config.network.cols}"
            if not self.config.network.edge_list else Path(self.config.network.edge_list).stem,
            "pattern": self.config.demand.pattern,
            "rule": self.config.demand.rule,
            "model": self.config.model.kind,
        })
        logger.info(f"[CLI] {self.command} in {self.root}")
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.manifest.timings[self.command] = round(time.perf_counter() - self._start, 3)
                (self.root / "manifest.json").write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")
        finally:
            if self._handler is not None:
                logging.getLogger().removeHandler(self._handler)
                self._handler.close()
            (self.root / ".lock").unlink(missing_ok=True)
        return False

    def record(self, group: str, path: Path) -> str:
        """Hash an artifact into the manifest under a run-relative path"""
        path = Path(path)
        try:
            key = str(path.resolve().relative_to(self.root.resolve()))
        except ValueError:
            key = str(path.resolve())
        digest = sha256_file(path)
        getattr(self.manifest, group)[key] = digest
        return digest


def verify_manifest(run_dir: Path) -> RunManifest:
    """
    Load a manifest and check every referenced artifact.

    Raises:
        ManifestError: Missing manifest, missing artifact or hash mismatch
    """
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise ManifestError(f"No manifest in {run_dir}")
    manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    for group in (manifest.inputs, manifest.datasets, manifest.checkpoints, manifest.reports):
        for rel, digest in group.items():
            artifact = Path(rel) if Path(rel).is_absolute() else Path(run_dir) / rel
            if not artifact.exists():
                raise ManifestError(f"{run_dir}: artifact {rel} is missing")
            if sha256_file(artifact) != digest:
                raise ManifestError(f"{run_dir}: hash mismatch for {rel}")
    return manifest


# ============================================================================
# MODEL PERSISTENCE
# ============================================================================

def save_model(path: Path, kind: str, model, net: RoadNetwork, meta: Dict) -> None:
    """Write any trained model into the checkpoint container, network included"""
    if kind == "mmc":
        tensors = model.to_tensors()
    elif kind == "bcrnn":
        tensors = model.state_dict()
    elif kind.startswith("maxent"):
        tensors = model.to_tensors()
    elif kind == "trajgail":
        tensors = trajgail.checkpoint_tensors(model)
    else:
        raise ContractViolation(f"Unknown model kind {kind!r}")
    metadata = {"kind": kind, "network": edge_list_text(net), "network_name": net.name}
    metadata.update(meta)
    save_checkpoint(path, tensors, metadata)


def load_model(path: Path):
    """Rebuild (kind, model, network, metadata) from a checkpoint alone"""
    tensors, meta = load_checkpoint(path)
    if "kind" not in meta or "network" not in meta:
        raise DataFormatError(f"{path}: checkpoint metadata lacks kind/network")
    net = parse_edge_list(meta["network"], name=meta.get("network_name", "network"), source=str(path))
    kind = meta["kind"]
    if kind == "mmc":
        model = MmcModel.from_tensors(tensors, net.n_links)
    elif kind == "bcrnn":
        model = BcRnnModel(net.n_tokens, meta["hidden_size"], meta["num_layers"])
        model.load_state_dict(tensors)
    elif kind.startswith("maxent"):
        model = MaxEntModel.from_tensors(tensors, meta["variant"], meta["horizon"])
    elif kind == "trajgail":
        config = TrainConfig(hidden_size=meta["hidden_size"], num_layers=meta["num_layers"])
        model, _, _ = trajgail.models_from_tensors(tensors, net, config)
    else:
        raise DataFormatError(f"{path}: unknown model kind {kind!r}")
    return kind, model, net, meta


def generate_with(kind: str, model, net: RoadNetwork, n: int, max_len: int, seed: int) -> Dataset:
    if kind == "mmc":
        return mmc_generate(model, net, n, max_len, seed)
    if kind == "bcrnn":
        return bc_rnn_generate(model, net, n, max_len, seed)
    if kind.startswith("maxent"):
        return maxent_generate(model, net, n, max_len, seed)
    return trajgail.generate(model, net, n, max_len, seed)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_simulate(config: RunConfig, workers: int = 1) -> Path:
    """Simulate the expert dataset into data/expert.csv"""
    net = build_network(config.network)
    pattern, rule = demand_from(config.demand)
    with RunDirectory(config, "simulate") as run:
        dataset = generate_demand(net, pattern, rule, config.demand.n, config.io.seed,
                                  k_max=config.demand.k_max, workers=workers)
        out = run.path("data", "expert.csv")
        save_csv(dataset, out)
        run.record("datasets", out)
        network_file = run.path("data", "network.edgelist")
        network_file.write_text(edge_list_text(net), encoding="utf-8")
        run.record("inputs", network_file)
        entropy = link_transition_entropy(dataset)
        run.manifest.metrics["entropy_expert"] = entropy
    print(f"trajectories: {len(dataset)}")
    print(f"routes: {len(route_counts(dataset))}")
    print(f"link transition entropy: {entropy:.6f}")
    return out


def _split_if_needed(run: RunDirectory, config: RunConfig) -> Path:
    train_csv = run.path("data", "train.csv")
    if not train_csv.exists():
        expert_csv = run.path("data", "expert.csv")
        if not expert_csv.exists():
            raise DataFormatError(f"No training data: {train_csv} or {expert_csv} must exist")
        train_set, test_set = split(load_csv(expert_csv), config.eval.split_ratio, config.io.seed)
        save_csv(train_set, train_csv)
        save_csv(test_set, run.path("data", "test.csv"))
        run.record("datasets", train_csv)
        run.record("datasets", run.path("data", "test.csv"))
    return train_csv


def cmd_train(config: RunConfig, train_csv: Optional[str] = None) -> Path:
    """Train the configured model; writes ckpt/model.ckpt and its training log"""
    net = build_network(config.network)
    kind = config.model.kind
    with RunDirectory(config, "train") as run:
        path = Path(train_csv) if train_csv else _split_if_needed(run, config)
        dataset = load_csv(path, net)
        if len(dataset) == 0:
            raise ContractViolation(f"{path} holds no trajectories")
        run.record("inputs", path)
        max_len = config.train.max_len or config.eval.max_len or 3 * longest_route(dataset)
        meta: Dict = {"max_len": max_len, "seed": config.io.seed}
        started = time.perf_counter()

        if kind == "mmc":
            model = mmc_fit(dataset, net)
        elif kind == "bcrnn":
            bc = bc_config_from(config)
            model, history = bc_rnn_train(dataset, net, bc)
            meta.update(hidden_size=bc.hidden_size, num_layers=bc.num_layers)
            log_path = run.path("reports", "bc_loss.csv")
            pd.DataFrame({"epoch": range(len(history)), "loss": history}).to_csv(
                log_path, index=False, lineterminator="\n", float_format="%.10g")
            run.record("reports", log_path)
        elif kind in ("maxent_svf", "maxent_savf"):
            model = maxent_train(dataset, net, kind.split("_")[1], maxent_config_from(config))
            meta.update(variant=model.variant, horizon=model.horizon, converged=model.converged)
            run.manifest.labels["maxent_converged"] = str(model.converged).lower()
        else:
            train_config = train_config_from(config)
            model = trajgail.train(dataset, net, train_config.model_copy(update={"max_len": max_len}))
            meta.update(hidden_size=train_config.hidden_size, num_layers=train_config.num_layers)
            log_path = run.path("reports", "convergence.csv")
            trajgail.write_convergence_csv(model.log, log_path)
            run.record("reports", log_path)

        run.manifest.timings["train_seconds"] = round(time.perf_counter() - started, 3)
        ckpt = run.path("ckpt", "model.ckpt")
        save_model(ckpt, kind, model, net, meta)
        run.record("checkpoints", ckpt)
    return ckpt


def cmd_generate(config: RunConfig, checkpoint: Optional[str] = None, n: Optional[int] = None,
                 seed: Optional[int] = None) -> Path:
    """Sample n trajectories from a checkpoint into data/generated.csv"""
    with RunDirectory(config, "generate") as run:
        ckpt = Path(checkpoint) if checkpoint else run.path("ckpt", "model.ckpt")
        kind, model, net, meta = load_model(ckpt)
        count = n or config.eval.n_generate
        max_len = config.eval.max_len or int(meta["max_len"])
        sample_seed = config.io.seed if seed is None else seed
        dataset, seconds = measure_throughput(lambda: generate_with(kind, model, net, count, max_len, sample_seed))
        out = run.path("data", "generated.csv")
        save_csv(dataset, out)
        run.record("inputs", ckpt)
        run.record("datasets", out)
        run.manifest.timings["generate_seconds"] = round(seconds, 4)
        run.manifest.metrics["generated"] = float(count)
        logger.info(f"[CLI] Generated {count} trajectories with {kind} in {seconds:.3f}s")
    return out


def cmd_evaluate(config: RunConfig, generated: Optional[str] = None, reference: Optional[str] = None,
                 workers: int = 1):
    """Score generated vs reference; writes reports/scores.csv and reports/distribution.csv"""
    net = build_network(config.network)
    with RunDirectory(config, "evaluate") as run:
        gen_path = Path(generated) if generated else run.path("data", "generated.csv")
        ref_path = Path(reference) if reference else run.path("data", "test.csv")
        gen, ref = load_csv(gen_path, net), load_csv(ref_path, net)
        run.record("inputs", gen_path)
        run.record("inputs", ref_path)
        scores = dataset_scores(gen, ref, n=config.eval.bleu_n, workers=workers)
        dist = distribution_report(gen, ref)

        scores_path = run.path("reports", "scores.csv")
        dist_path = run.path("reports", "distribution.csv")
        write_scores_csv(scores, scores_path)
        write_distribution_csv(dist, dist_path)
        run.record("reports", scores_path)
        run.record("reports", dist_path)
        run.manifest.metrics.update({
            "d_js": dist.d_js,
            "unknown_rate": dist.unknown_rate,
            "bleu_mean": scores.bleu_mean,
            "bleu_std": scores.bleu_std,
            "meteor_mean": scores.meteor_mean,
            "meteor_std": scores.meteor_std,
            "entropy_generated": dist.entropy_generated,
            "entropy_reference": dist.entropy_reference,
        })
    print(f"d_JS: {dist.d_js:.6f}  unknown rate: {dist.unknown_rate:.4f}")
    print(f"BLEU-{scores.n}: {scores.bleu_mean:.4f} +/- {scores.bleu_std:.4f}  "
          f"METEOR: {scores.meteor_mean:.4f} +/- {scores.meteor_std:.4f}")
    return scores, dist


def cmd_report(run_dirs: Sequence[str], output: Optional[str] = None) -> str:
    """
    Markdown tables from run manifests, without recomputation: d_JS grid,
    BLEU/METEOR mean and std grid, entropy vs d_JS points with fitted slopes.
    """
    rows = []
    for run_dir in run_dirs:
        manifest = verify_manifest(Path(run_dir))
        if "d_js" not in manifest.metrics:
            logger.warning(f"[CLI] {run_dir} has no evaluation metrics; skipped")
            continue
        rows.append({**manifest.labels, **manifest.metrics, "run": manifest.run_id})
        if "generate_seconds" in manifest.timings:
            logger.info(f"[CLI] {manifest.run_id}: generation took {manifest.timings['generate_seconds']}s")
    if not rows:
        raise ManifestError("No evaluated runs to report")
    frame = pd.DataFrame(rows)
    keys = ["network", "pattern", "rule"]

    sections = ["# Route distribution d_JS\n", markdown_table(
        frame.pivot_table(index=keys, columns="model", values="d_js", aggfunc="first").reset_index())]
    scores = frame[keys + ["model", "bleu_mean", "bleu_std", "meteor_mean", "meteor_std"]].sort_values(keys + ["model"])
    sections += ["\n# Trajectory scores\n", markdown_table(scores)]

    points = frame[["model", "entropy_reference", "d_js"]].sort_values(["model", "entropy_reference"])
    sections += ["\n# Link transition entropy vs d_JS\n", markdown_table(points)]
    slopes = []
    for model, group in points.groupby("model", sort=True):
        try:
            fit = complexity_sensitivity(list(zip(group["entropy_reference"], group["d_js"])))
            slopes.append({"model": model, "slope": fit.slope, "intercept": fit.intercept,
                           "r_squared": fit.r_squared, "points": fit.n_points})
        except ContractViolation:
            slopes.append({"model": model, "slope": float("nan"), "intercept": float("nan"),
                           "r_squared": float("nan"), "points": len(group)})
    sections += ["\n# Complexity sensitivity\n", markdown_table(pd.DataFrame(slopes))]

    text = "".join(sections)
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text, encoding="utf-8")
        logger.info(f"[CLI] Wrote report to {output}")
    return text


def gradcheck_objectives(net: RoadNetwork, hidden_size: int = 4, num_layers: int = 2, seed: int = 0) -> Dict[str, float]:
    """Max relative gradient errors of the policy, value and discriminator objectives on a toy network"""
    config = TrainConfig(hidden_size=hidden_size, num_layers=num_layers, seed=seed)
    policy, value, discrim = trajgail.build_models(net, config)
    expert_routes = _toy_routes(net)
    expert = trajgail.StepPairs.from_dataset(Dataset.from_routes(expert_routes), net)
    batch = trajgail.rollout(policy, net, n=6, max_len=2 * max(len(r) for r in expert_routes), seed=seed)
    trajgail.assign_rewards(batch, discrim, config.gamma)
    targets = trajgail.value_targets(value, policy, batch, config.gamma)
    with no_grad():
        q_taken = value.q_taken(batch.pairs).data

    errors = {
        "J_policy": grad_check(
            lambda: trajgail.policy_objective(policy, batch.pairs, q_taken, config.entropy_coef)[0],
            policy.parameters()),
        "J_value": grad_check(lambda: trajgail.value_objective(value, batch.pairs, targets), value.parameters()),
        "J_discrim": grad_check(lambda: trajgail.discriminator_objective(discrim, batch.pairs, expert),
                                discrim.parameters()),
    }
    return errors


def _toy_routes(net: RoadNetwork) -> List[Tuple[str, ...]]:
    """Every shortest route between the network's boundary links"""
    routes = []
    for origin in net.sources:
        for dest in net.sink_order:
            routes.extend(enumerate_shortest_routes(net, origin, dest))
    return routes


def cmd_gradcheck(config: RunConfig) -> Dict[str, Dict[str, float]]:
    """Gradient checks on the 2-link chain and the two-route diamond"""
    results = {}
    for net in (build_chain((100.0, 100.0)), build_two_route()):
        errors = gradcheck_objectives(net, seed=config.io.seed)
        results[net.name] = errors
        for objective, error in errors.items():
            verdict = "PASS" if error < GRADCHECK_TOLERANCE else "FAIL"
            print(f"{net.name:10s} {objective:10s} max rel err {error:.3e}  {verdict}")
    return results


def cmd_pipeline(config: RunConfig, workers: int = 1) -> Tuple:
    """simulate -> split -> train -> generate -> evaluate in one run directory"""
    cmd_simulate(config, workers=workers)
    cmd_train(config)
    cmd_generate(config)
    return cmd_evaluate(config, workers=workers)


# ============================================================================
# ENTRY POINT
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajlab", description="Vehicle trajectory generation experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="Global seed (overrides [io] seed)")
    common.add_argument("--out", help="Parent directory of run directories (overrides [io] out)")
    common.add_argument("--workers", type=int, help="Worker processes (overrides TRAJLAB_WORKERS)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="Simulate an expert dataset")
    p = sub.add_parser("train", parents=[common], help="Train the configured model")
    p.add_argument("--data", help="Training CSV (default: the run's data/train.csv)")
    p = sub.add_parser("generate", parents=[common], help="Generate trajectories from a checkpoint")
    p.add_argument("--checkpoint", help="Checkpoint (default: the run's ckpt/model.ckpt)")
    p.add_argument("-n", type=int, help="Number of trajectories (default: [eval] n_generate)")
    p = sub.add_parser("evaluate", parents=[common], help="Score generated against reference trajectories")
    p.add_argument("--generated", help="Generated CSV (default: the run's data/generated.csv)")
    p.add_argument("--reference", help="Reference CSV (default: the run's data/test.csv)")
    p = sub.add_parser("report", parents=[common], help="Markdown tables from run directories")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("--output", help="Write the Markdown here as well as stdout")
    sub.add_parser("gradcheck", parents=[common], help="Check analytic gradients of the training objectives")
    sub.add_parser("pipeline", parents=[common], help="simulate, split, train, generate and evaluate")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        workers = worker_count(args.workers)
        config = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "simulate":
            cmd_simulate(config, workers=workers)
        elif args.command == "train":
            cmd_train(config, args.data)
        elif args.command == "generate":
            cmd_generate(config, args.checkpoint, args.n, args.seed)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.generated, args.reference, workers=workers)
        elif args.command == "report":
            print(cmd_report(args.runs, args.output))
        elif args.command == "gradcheck":
            results = cmd_gradcheck(config)
            if any(e >= GRADCHECK_TOLERANCE for errors in results.values() for e in errors.values()):
                return EXIT_CONTRACT
        elif args.command == "pipeline":
            cmd_pipeline(config, workers=workers)
    except (ConfigError, DataFormatError, ManifestError, OSError) as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        return EXIT_IO
    except (ContractViolation, DatasetValidationError, NetworkLookupError) as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        return EXIT_CONTRACT
    except TrajLabError as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
