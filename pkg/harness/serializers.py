"""
YAML run configurations.

A config names an experiment, its agents and seeds, overrides any base
hyperparameter and optionally sweeps some of them::

    experiment: fig3
    agents: [omd_return, mle]
    env: default
    seeds: [0, 1, 2]
    tabular_steps: 1000
    sweep:
      kappa: [0.5, 1.0, 2.0]

Unknown keys, out-of-range values and agents the experiment does not know
are rejected field by field before anything runs.
"""
from pathlib import Path
from typing import Any, Dict, List, Union
import logging

import yaml
from django.core.exceptions import ValidationError
from rest_framework import serializers

from funcapprox.models import ExplorationMode
from mdp_core.serializers import StrictFieldsMixin

from .experiments import EXPERIMENTS
from .models import FIXED_FIELDS, RunConfig, format_cell_value

logger = logging.getLogger(__name__)


def _positive(name: str, value: float) -> float:
    if not value > 0.0:
        raise serializers.ValidationError(f"{name} must be > 0, got {value}.")
    return value


class RunConfigSerializer(StrictFieldsMixin, serializers.Serializer):
    """Validates a raw mapping and builds a :class:`harness.models.RunConfig`."""

    experiment = serializers.CharField()
    agents = serializers.ListField(child=serializers.CharField(), allow_empty=False)
    env = serializers.CharField(required=False)
    seeds = serializers.ListField(child=serializers.IntegerField(min_value=0), allow_empty=False, required=False)
    sweep = serializers.DictField(
        child=serializers.ListField(child=serializers.JSONField(), allow_empty=False), required=False
    )

    gamma = serializers.FloatField(min_value=0.0, required=False)
    alpha = serializers.FloatField(required=False)
    use_identity_inverse = serializers.BooleanField(required=False)

    n_states = serializers.IntegerField(min_value=1, required=False)
    n_actions = serializers.IntegerField(min_value=1, required=False)
    kappa = serializers.FloatField(required=False)
    learning_rate = serializers.FloatField(required=False)
    tabular_steps = serializers.IntegerField(min_value=1, required=False)
    inner_noise_sigma = serializers.FloatField(min_value=0.0, required=False)
    equivalence_tol = serializers.FloatField(required=False)
    n_pairs = serializers.IntegerField(min_value=1, required=False)
    r_max = serializers.FloatField(required=False)

    total_steps = serializers.IntegerField(min_value=1, required=False)
    q_hidden = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False)
    model_hidden = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False)
    model_width = serializers.IntegerField(min_value=1, allow_null=True, required=False)
    q_learning_rate = serializers.FloatField(required=False)
    model_learning_rate = serializers.FloatField(required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False)
    buffer_capacity = serializers.IntegerField(min_value=1, required=False)
    ema_tau = serializers.FloatField(required=False)
    inner_steps = serializers.IntegerField(min_value=1, required=False)
    warmup_steps = serializers.IntegerField(min_value=0, required=False)
    eval_interval = serializers.IntegerField(min_value=1, required=False)
    eval_episodes = serializers.IntegerField(min_value=1, required=False)
    exploration = serializers.ChoiceField(choices=[mode.value for mode in ExplorationMode], required=False)
    epsilon = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    double_q = serializers.BooleanField(required=False)
    n_vep_value_fns = serializers.IntegerField(min_value=1, required=False)
    n_distractors = serializers.IntegerField(min_value=0, required=False)
    trace_steps = serializers.IntegerField(min_value=1, required=False)

    def validate_gamma(self, value: float) -> float:
        if not value < 1.0:
            raise serializers.ValidationError(f"gamma must be < 1, got {value}.")
        return value

    def validate_alpha(self, value: float) -> float:
        return _positive('alpha', value)

    def validate_kappa(self, value: float) -> float:
        return _positive('kappa', value)

    def validate_learning_rate(self, value: float) -> float:
        return _positive('learning_rate', value)

    def validate_q_learning_rate(self, value: float) -> float:
        return _positive('q_learning_rate', value)

    def validate_model_learning_rate(self, value: float) -> float:
        return _positive('model_learning_rate', value)

    def validate_equivalence_tol(self, value: float) -> float:
        return _positive('equivalence_tol', value)

    def validate_r_max(self, value: float) -> float:
        return _positive('r_max', value)

    def validate_ema_tau(self, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError(f"ema_tau must lie in (0, 1), got {value}.")
        return value

    def validate_sweep(self, value: Dict[str, List[Any]]) -> Dict[str, List[Any]]:
        """Each grid must name a sweepable field and hold distinct, individually valid values."""
        checked = {}
        for key, grid in value.items():
            if key in FIXED_FIELDS or key not in self.fields:
                raise serializers.ValidationError({key: [f"{key} cannot be swept."]})
            field = self.fields[key]
            field_validator = getattr(self, f'validate_{key}', None)
            values = []
            for item in grid:
                try:
                    item = field.run_validation(item)
                    if field_validator is not None:
                        item = field_validator(item)
                except serializers.ValidationError as exc:
                    raise serializers.ValidationError({key: exc.detail})
                values.append(item)
            labels = [format_cell_value(item) for item in values]
            if len(set(labels)) != len(labels):
                raise serializers.ValidationError({key: ["Grid values must be distinct."]})
            checked[key] = values
        return checked

    def validate(self, attrs: Dict[str, Any]) -> Dict[str, Any]:
        experiment = EXPERIMENTS.get(attrs['experiment'])
        if experiment is None:
            raise serializers.ValidationError(
                {'experiment': [f"Unknown experiment {attrs['experiment']!r}; choose from {sorted(EXPERIMENTS)}."]}
            )
        unknown = [agent for agent in attrs['agents'] if agent not in experiment.agents]
        if unknown:
            raise serializers.ValidationError(
                {'agents': [f"{experiment.name} does not run {unknown}; choose from {list(experiment.agents)}."]}
            )
        if len(set(attrs['agents'])) != len(attrs['agents']):
            raise serializers.ValidationError({'agents': ["Agents must be distinct."]})
        seeds = attrs.get('seeds', [])
        if len(set(seeds)) != len(seeds):
            raise serializers.ValidationError({'seeds': ["Seeds must be distinct."]})
        return attrs

    def create(self, validated_data: Dict[str, Any]) -> RunConfig:
        return RunConfig(**validated_data)


def flatten_errors(errors: Any, prefix: str = '') -> List[str]:
    """``field: message`` lines from a (possibly nested) DRF error structure."""
    if isinstance(errors, dict):
        messages = []
        for key, details in errors.items():
            messages.extend(flatten_errors(details, f"{prefix}.{key}" if prefix else str(key)))
        return messages
    if isinstance(errors, list):
        return [message for item in errors for message in flatten_errors(item, prefix)]
    return [f"{prefix}: {errors}" if prefix else str(errors)]


def parse_run_config(payload: Dict[str, Any]) -> RunConfig:
    """
    Validate a mapping and return the config it describes.

    Raises:
        ValidationError: One message per offending field.
    """
    if not isinstance(payload, dict):
        raise ValidationError("A run config must be a mapping.")
    serializer = RunConfigSerializer(data=payload)
    if not serializer.is_valid():
        logger.error("Invalid run config: %s", serializer.errors)
        raise ValidationError(flatten_errors(serializer.errors))
    return serializer.save()


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a YAML run config."""
    path = Path(path)
    logger.info("Loading run config from %s", path)
    with path.open('r', encoding='utf-8') as handle:
        payload = yaml.safe_load(handle)
    return parse_run_config(payload)


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as handle:
        yaml.safe_dump(config.to_dict(), handle, sort_keys=False)
    return path
