"""
YAML file format for tabular MDPs.

Schema (all keys required, no others allowed)::

    n_states: 2
    n_actions: 2
    gamma: 0.9
    rho0: [0.5, 0.5]
    rewards:            # rewards[s][a]
      - [0.6, 0.0]
      - [1.0, 0.2]
    transitions:        # transitions[s][a][s']
      - [[1.0, 0.0], [0.0, 1.0]]
      - [[0.0, 1.0], [1.0, 0.0]]
"""
from pathlib import Path
from typing import Any, Dict, Union
import logging

import numpy as np
import yaml
from django.core.exceptions import ValidationError
from rest_framework import serializers

from .models import TabularMDP

logger = logging.getLogger(__name__)


class StrictFieldsMixin:
    """Reject payload keys that the serializer does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                logger.error("Unknown keys in %s payload: %s", type(self).__name__, unknown)
                raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})
        return super().to_internal_value(data)


class TabularMDPSerializer(StrictFieldsMixin, serializers.Serializer):
    """
    Validates a raw mapping against the MDP schema and builds a :class:`TabularMDP`.

    Errors name the first violated invariant together with its indices,
    e.g. ``transitions[1, 0] sums to 0.9, expected 1.``.
    """

    n_states = serializers.IntegerField(min_value=1)
    n_actions = serializers.IntegerField(min_value=1)
    gamma = serializers.FloatField(min_value=0.0)
    rho0 = serializers.ListField(child=serializers.FloatField(), allow_empty=False)
    rewards = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    transitions = serializers.ListField(
        child=serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    )

    def validate(self, attrs: Dict[str, Any]) -> Dict[str, Any]:
        n_states, n_actions = attrs['n_states'], attrs['n_actions']

        if len(attrs['rho0']) != n_states:
            raise serializers.ValidationError({'rho0': [f"Expected {n_states} entries, got {len(attrs['rho0'])}."]})
        if len(attrs['rewards']) != n_states:
            raise serializers.ValidationError({'rewards': [f"Expected {n_states} rows, got {len(attrs['rewards'])}."]})
        for s, row in enumerate(attrs['rewards']):
            if len(row) != n_actions:
                raise serializers.ValidationError({'rewards': [f"rewards[{s}] has {len(row)} entries, expected {n_actions}."]})
        if len(attrs['transitions']) != n_states:
            raise serializers.ValidationError(
                {'transitions': [f"Expected {n_states} rows, got {len(attrs['transitions'])}."]}
            )
        for s, per_state in enumerate(attrs['transitions']):
            if len(per_state) != n_actions:
                raise serializers.ValidationError(
                    {'transitions': [f"transitions[{s}] has {len(per_state)} actions, expected {n_actions}."]}
                )
            for a, row in enumerate(per_state):
                if len(row) != n_states:
                    raise serializers.ValidationError(
                        {'transitions': [f"transitions[{s}][{a}] has {len(row)} entries, expected {n_states}."]}
                    )

        try:
            attrs['mdp'] = TabularMDP(
                transitions=np.array(attrs['transitions']),
                rewards=np.array(attrs['rewards']),
                gamma=attrs['gamma'],
                rho0=np.array(attrs['rho0']),
            )
        except ValidationError as exc:
            raise serializers.ValidationError({'mdp': exc.messages})
        return attrs

    def create(self, validated_data: Dict[str, Any]) -> TabularMDP:
        return validated_data['mdp']

    def to_representation(self, instance: TabularMDP) -> Dict[str, Any]:
        return {
            'n_states': instance.n_states,
            'n_actions': instance.n_actions,
            'gamma': instance.gamma,
            'rho0': instance.rho0.tolist(),
            'rewards': instance.rewards.tolist(),
            'transitions': instance.transitions.tolist(),
        }


def parse_mdp(payload: Dict[str, Any]) -> TabularMDP:
    """
    Validate a mapping and return the MDP it describes.

    Raises:
        ValidationError: With the serializer's field-level messages.
    """
    serializer = TabularMDPSerializer(data=payload)
    if not serializer.is_valid():
        logger.error("Invalid MDP description: %s", serializer.errors)
        raise ValidationError(_flatten_errors(serializer.errors))
    return serializer.save()


def _flatten_errors(errors: Dict[str, Any]) -> list:
    messages = []
    for field, details in errors.items():
        for detail in details if isinstance(details, list) else [details]:
            messages.append(f"{field}: {detail}")
    return messages


def load_mdp(path: Union[str, Path]) -> TabularMDP:
    """Read and validate an MDP YAML file."""
    path = Path(path)
    logger.info("Loading MDP from %s", path)
    with path.open('r', encoding='utf-8') as handle:
        payload = yaml.safe_load(handle)
    if not isinstance(payload, dict):
        raise ValidationError(f"{path} does not contain a mapping.")
    return parse_mdp(payload)


def dump_mdp(mdp: TabularMDP, path: Union[str, Path]) -> Path:
    """Write ``mdp`` to ``path`` in the YAML schema and return the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as handle:
        yaml.safe_dump(dict(TabularMDPSerializer(mdp).data), handle, sort_keys=False)
    logger.info("Wrote %s to %s", mdp, path)
    return path
