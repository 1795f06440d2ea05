import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from bvm_errors import ConfigError

logger = logging.getLogger(__name__)

EXPERIMENTS = ("parametric_demo", "plr_bvm", "mixture_bvm", "boundary_bvm",
               "coverage", "ilan_probe", "perturbation_probe")


class ExperimentConfig:
    def __init__(self,
                 experiment: str = "parametric_demo",
                 n_values: Optional[List[int]] = None,   # Default: [4, 16, 64, 256]
                 replications: int = 100,
                 seed: int = 20240611,
                 model_params: Optional[Dict[str, Any]] = None,
                 output_dir: str = "results",
                 jobs: int = 1,
                 level: float = 0.95,              # Credible / confidence level
                 h_grid_points: int = 2001,
                 verbose_logging: bool = False):
        """
        Initialize an experiment configuration.

        Args:
            experiment: one of EXPERIMENTS
            n_values: ascending sample sizes, nonempty
            replications: replications per sample size (>= 1)
            seed: master seed; replication r of n-index i uses the split (seed, i, r)
            model_params: nested model configuration handed to the model module
            output_dir: directory receiving report.csv, report.json and figures/
            jobs: worker processes for replications
            level: nominal level of credible and Wald intervals
            h_grid_points: resolution of local-parameter grids
            verbose_logging: log configuration state and changes at DEBUG

        Raises:
            ConfigError: If any value is out of range
            TypeError: If any value has the wrong type
        """
        self.verbose_logging = bool(verbose_logging)
        self.model_params = dict(model_params or {})

        self._experiment = "parametric_demo"
        self._n_values = [4, 16, 64, 256]
        self._replications = 1
        self._seed = 0
        self._output_dir = "results"
        self._jobs = 1
        self._level = 0.95
        self._h_grid_points = 2001

        self.experiment = experiment
        self.n_values = [4, 16, 64, 256] if n_values is None else n_values
        self.replications = replications
        self.seed = seed
        self.output_dir = output_dir
        self.jobs = jobs
        self.level = level
        self.h_grid_points = h_grid_points

        self._log_config_state("ExperimentConfig initialized")

    def _log_change(self, name: str, old_value, new_value) -> None:
        if self.verbose_logging and old_value != new_value:
            logger.debug("Configuration change: %s: %s -> %s (object %s)",
                         name, old_value, new_value, id(self))

    @property
    def experiment(self) -> str:
        """Which experiment to run."""
        return self._experiment

    @experiment.setter
    def experiment(self, value: str):
        if not isinstance(value, str):
            raise TypeError("experiment must be a string")
        if value not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}")
        old_value = self._experiment
        self._experiment = value
        self._log_change("experiment", old_value, value)

    @property
    def n_values(self) -> List[int]:
        """Nonempty ascending list of sample sizes."""
        return list(self._n_values)

    @n_values.setter
    def n_values(self, value: List[int]):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(n, int) and not isinstance(n, bool) for n in value):
            raise TypeError("n_values must be a list of integers")
        if not value:
            raise ConfigError("n_values must not be empty")
        if any(n < 0 for n in value):
            raise ConfigError("n_values must be nonnegative")
        if any(b <= a for a, b in zip(value[:-1], value[1:])):
            raise ConfigError("n_values must be strictly ascending")
        old_value = self._n_values
        self._n_values = list(value)
        self._log_change("n_values", old_value, self._n_values)

    @property
    def replications(self) -> int:
        return self._replications

    @replications.setter
    def replications(self, value: int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise TypeError("replications must be an integer")
        if value < 1:
            raise ConfigError("replications must be at least 1")
        old_value = self._replications
        self._replications = value
        self._log_change("replications", old_value, value)

    @property
    def seed(self) -> int:
        return self._seed

    @seed.setter
    def seed(self, value: int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise TypeError("seed must be an integer")
        if value < 0:
            raise ConfigError("seed must be nonnegative")
        old_value = self._seed
        self._seed = value
        self._log_change("seed", old_value, value)

    @property
    def output_dir(self) -> str:
        return self._output_dir

    @output_dir.setter
    def output_dir(self, value):
        if not isinstance(value, (str, Path)):
            raise TypeError("output_dir must be a path")
        if not str(value):
            raise ConfigError("output_dir must not be empty")
        old_value = self._output_dir
        self._output_dir = str(value)
        self._log_change("output_dir", old_value, self._output_dir)

    @property
    def jobs(self) -> int:
        """Worker processes for replications (1 runs in-process)."""
        return self._jobs

    @jobs.setter
    def jobs(self, value: int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise TypeError("jobs must be an integer")
        if value < 1:
            raise ConfigError("jobs must be at least 1")
        old_value = self._jobs
        self._jobs = value
        self._log_change("jobs", old_value, value)

    @property
    def level(self) -> float:
        return self._level

    @level.setter
    def level(self, value: float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise TypeError("level must be a number")
        value = float(value)
        if not 0.0 < value < 1.0:
            raise ConfigError("level must lie strictly between 0 and 1")
        old_value = self._level
        self._level = value
        self._log_change("level", old_value, value)

    @property
    def h_grid_points(self) -> int:
        return self._h_grid_points

    @h_grid_points.setter
    def h_grid_points(self, value: int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise TypeError("h_grid_points must be an integer")
        if value < 11:
            raise ConfigError("h_grid_points must be at least 11")
        old_value = self._h_grid_points
        self._h_grid_points = value
        self._log_change("h_grid_points", old_value, value)

    def param(self, key: str, default=None):
        """A model parameter with a default."""
        return self.model_params.get(key, default)

    # serialization
    def to_dict(self) -> Dict[str, Any]:
        return {"experiment": self._experiment, "n_values": list(self._n_values),
                "replications": self._replications, "seed": self._seed,
                "model_params": dict(self.model_params), "output_dir": self._output_dir,
                "jobs": self._jobs, "level": self._level,
                "h_grid_points": self._h_grid_points,
                "verbose_logging": self.verbose_logging}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any],
                  experiment: Optional[str] = None) -> "ExperimentConfig":
        """
        Build from a JSON object, starting from the experiment's preset.

        When experiment is given it fills in a missing "experiment" key and
        must agree with a present one.
        """
        if not isinstance(payload, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(payload) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        if experiment is not None and payload.get("experiment", experiment) != experiment:
            raise ConfigError(f"configuration is for {payload['experiment']!r}, not {experiment!r}")
        experiment = payload.get("experiment", experiment or "parametric_demo")
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}")
        config = getattr(cls, experiment)()
        config.verbose_logging = bool(payload.get("verbose_logging", False))
        for key in ("n_values", "replications", "seed", "output_dir", "jobs", "level",
                    "h_grid_points"):
            if key in payload:
                setattr(config, key, payload[key])
        if "model_params" in payload:
            if not isinstance(payload["model_params"], dict):
                raise ConfigError("model_params must be a JSON object")
            config.model_params.update(payload["model_params"])
        config._log_config_state("Configuration loaded")
        return config

    @classmethod
    def from_json(cls, path, experiment: Optional[str] = None) -> "ExperimentConfig":
        try:
            with open(path) as f:
                payload = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read configuration {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(payload, experiment)

    def _log_config_state(self, event: str):
        """Log the current state of all configuration parameters."""
        if self.verbose_logging:
            logger.debug("%s (object %s):", event, id(self))
            for key, value in self.to_dict().items():
                logger.debug("  %s: %s", key, value)

    # presets, one per experiment
    @classmethod
    def parametric_demo(cls) -> "ExperimentConfig":
        """Normal means on [-1, 2] with a polynomial prior; panels at n = 0..256."""
        return cls(experiment="parametric_demo", n_values=[4, 16, 64, 256],
                   replications=100, h_grid_points=3001,
                   model_params={"panel_n": [0, 1, 4, 16, 64, 256], "lower": -1.0,
                                 "upper": 2.0, "theta0": 0.5})

    @classmethod
    def plr_bvm(cls) -> "ExperimentConfig":
        return cls(experiment="plr_bvm", n_values=[50, 200, 800], replications=50,
                   model_params={"knots": 32, "prior_k": 1, "mode": "exact"})

    @classmethod
    def mixture_bvm(cls) -> "ExperimentConfig":
        return cls(experiment="mixture_bvm", n_values=[100, 400, 1600], replications=20,
                   model_params={"mcmc_steps": 3000})

    @classmethod
    def boundary_bvm(cls) -> "ExperimentConfig":
        return cls(experiment="boundary_bvm", n_values=[250, 1000], replications=50,
                   model_params={"mcmc_steps": 20000, "exact_n": [10, 100, 1000]})

    @classmethod
    def coverage(cls) -> "ExperimentConfig":
        return cls(experiment="coverage", n_values=[800], replications=400,
                   model_params={"knots": 32, "prior_k": 1})

    @classmethod
    def ilan_probe(cls) -> "ExperimentConfig":
        return cls(experiment="ilan_probe", n_values=[50, 200, 800], replications=20,
                   model_params={"knots": 32, "prior_k": 1, "draws": 2000,
                                 "h_values": [-2.0, -1.0, 1.0, 2.0]})

    @classmethod
    def perturbation_probe(cls) -> "ExperimentConfig":
        return cls(experiment="perturbation_probe", n_values=[100, 400, 1600],
                   replications=20,
                   model_params={"knots": 32, "prior_k": 1, "h": 0.0, "rho": 0.1,
                                 "draws": 2000})
