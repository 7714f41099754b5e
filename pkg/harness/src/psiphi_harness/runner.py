import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import pandas as pd

from psiphi_core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from psiphi_core.demos import DemoSet, load_demos, save_demos
from psiphi_core.factory import ComponentFactory
from psiphi_core.gridworld import load_map
from psiphi_core.interfaces import ConfigError, InvalidArgument, MalformedRecord
from psiphi_core.network import ParamStore
from psiphi_core.parameters import ExperimentConfig, config_from_dict
from psiphi_learning.agent import PsiPhiAgent, eval_points_frame
from psiphi_learning.itd import run_itd

from .experiments import (
    cumulant_color_contrast,
    dump_cumulants,
    eval_few_shot,
    eval_imitation,
    eval_irl,
    few_shot_summary,
    make_demos,
    sweep_cumulant_dim,
    sweep_pattern,
)
from .run_log import EvalReport, RunLogger
from .theorems import TheoremReport, check_theorems

DEMOS_FILE = "demos.jsonl"


def load_config(path: Optional[Union[str, Path]]) -> Tuple[ExperimentConfig, Dict[str, Any]]:
    """Read a JSON config file into an ExperimentConfig.

    Returns:
        Tuple of (config, the canonical dict form hashed into the manifest)

    Raises:
        ConfigError: If the file is unreadable, not JSON or fails validation
    """
    if path is None:
        config = ExperimentConfig()
        return config, asdict(config)
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Loading config {path} failed: {str(e)}")
    config = config_from_dict(ExperimentConfig, data)
    if config.map_path:
        try:
            load_map(config.map_path)
        except (MalformedRecord, InvalidArgument) as e:
            raise ConfigError(f"Map {config.map_path} is invalid: {str(e)}")
    return config, asdict(config)


class ExperimentRunner:
    """Runs one CLI command: resolves demos, seeds the run and writes its outputs.

    Args:
        config: Experiment settings
        seed: Root seed of the run
        output_dir: Directory for the manifest, tables and checkpoints
        config_dict: Canonical config mapping recorded in the manifest
        command: Subcommand name recorded in the manifest
    """

    def __init__(
        self,
        config: ExperimentConfig,
        seed: int = 0,
        output_dir: Union[str, Path] = "runs",
        config_dict: Optional[Dict[str, Any]] = None,
        command: Optional[str] = None
    ):
        self._log = logging.getLogger("ExperimentRunner")
        self.config = config
        self.seed = seed
        self.run_log = RunLogger(output_dir)
        self.run_log.log_config(config_dict or asdict(config), seed, command)
        self._log.info(f"Run {command or 'experiment'} with seed {seed} writing to {self.run_log.run_dir}")

    def demos(self, path: Optional[Union[str, Path]] = None) -> DemoSet:
        """Demonstrations from path, or freshly generated from config.demo."""
        if path is not None:
            demos = load_demos(path)
            self._log.info(f"Loaded {len(demos)} trajectories from {path}")
            return demos
        if not self.config.demo.tasks:
            self._log.info("No demonstrator tasks configured, running without demonstrations")
            return DemoSet()
        return make_demos(self.config, self.seed)

    def gen_demos(self) -> DemoSet:
        demos = make_demos(self.config, self.seed)
        count = save_demos(demos, self.run_log.path(DEMOS_FILE))
        self.run_log.log_event("demos", {"trajectories": count, "steps": demos.n_steps, "agents": demos.n_agents})
        return demos

    def train_itd(self, demos_path: Optional[Union[str, Path]] = None) -> ParamStore:
        demos = self.demos(demos_path)
        params, log = run_itd(demos, self.config.itd, self.seed)
        self.run_log.write_table("itd_log", log.to_frame())
        save_checkpoint(
            Checkpoint(params=params, metadata={"seed": self.seed, "itd_steps": self.config.itd.max_steps}),
            self.run_log.path("itd.ckpt"),
        )
        return params

    def train_psiphi(self, demos_path: Optional[Union[str, Path]] = None) -> PsiPhiAgent:
        demos = self.demos(demos_path)
        env = ComponentFactory.create_env(self.config)
        agent = PsiPhiAgent(env, demos, self.config.psiphi, self.seed)
        points = agent.train()
        self.run_log.write_table("eval_points", eval_points_frame(points))
        self.run_log.write_table("buffer_stats", pd.DataFrame([agent.buffer.statistics()]))
        agent.save(self.run_log.path("psiphi.ckpt"))
        return agent

    def eval_irl(self, demos_path: Optional[Union[str, Path]] = None) -> EvalReport:
        frame = eval_irl(self.demos(demos_path), self.config, self.seed)
        report = EvalReport()
        report.add("irl", frame)
        report.add("irl_summary", frame.groupby("method")["normalized_return"].agg(["median", "mean", "count"]).reset_index())
        report.write(self.run_log)
        return report

    def eval_imitation(self, demos_path: Optional[Union[str, Path]] = None, with_rl: bool = True) -> EvalReport:
        frame = eval_imitation(self.demos(demos_path), self.config, self.seed, with_rl=with_rl)
        report = EvalReport()
        report.add("imitation", frame)
        report.write(self.run_log)
        return report

    def eval_transfer(self, demos_path: Optional[Union[str, Path]] = None) -> EvalReport:
        frame = eval_few_shot(self.demos(demos_path), self.config, self.seed)
        report = EvalReport()
        report.add("transfer", frame)
        report.add("transfer_summary", few_shot_summary(frame))
        report.write(self.run_log)
        return report

    def check_bounds(self) -> TheoremReport:
        """Bound, lemma and policy-invariance checks on config.eval.n_mdps random MDPs."""
        report = check_theorems(
            self.config.eval.n_mdps, self.seed, self.config.eval.itd_mdps, gamma=self.config.itd.gamma
        )
        self.run_log.write_table("bounds", report.bounds_frame())
        self.run_log.write_table("lemma", report.lemma_frame())
        self.run_log.write_table("invariance", report.invariance_frame())
        self.run_log.log_event("theorems", report.summary())
        if report.violations:
            self._log.warning(f"{report.violations} exact check(s) failed")
        return report

    def dump_cumulants(
        self,
        checkpoint_path: Optional[Union[str, Path]] = None,
        demos_path: Optional[Union[str, Path]] = None
    ) -> Dict[int, Any]:
        if checkpoint_path is not None:
            params = load_checkpoint(checkpoint_path).params
        else:
            params = self.train_itd(demos_path)
        spec = ComponentFactory.create_spec(self.config)
        grids = dump_cumulants(params, spec)
        for i, grid in grids.items():
            self.run_log.write_table(f"cumulant_{i}", grid)
        self.run_log.write_table("cumulant_contrast", cumulant_color_contrast(grids, spec))
        return grids

    def sweep_dim(self, demos_path: Optional[Union[str, Path]] = None, seeds: Optional[Tuple[int, ...]] = None) -> EvalReport:
        seeds = seeds or (self.seed,)
        frame = sweep_cumulant_dim(self.demos(demos_path), self.config, self.config.eval.cumulant_dims, seeds)
        report = EvalReport()
        report.add("sweep", frame)
        report.write(self.run_log)
        self.run_log.log_event("sweep_pattern", sweep_pattern(frame))
        return report

