"""
Run Config Serializers
Validates the JSON run configs (model, training, rollout, dataset, ablation
grid) before anything is built from them.
"""
import json
from pathlib import Path

from rest_framework import serializers

from .env.dataset import CAMERA_MODES
from .env.world import CHAIN, TASK_KINDS
from .evaluation import SAMPLERS
from .exceptions import ConfigValidationError, DatasetIOError
from .training import PARAM_GROUPS
from .transformer import HEAD_KINDS

CAMERA_SPLITS = ("train", "test", "fixed")


class ModelConfigSerializer(serializers.Serializer):
    """
    Architecture of the policy network.
    Head kind, horizon and history length live in the training section.
    """
    d = serializers.IntegerField(min_value=8, default=128)
    n_layers = serializers.IntegerField(min_value=1, default=4)
    n_heads = serializers.IntegerField(min_value=1, default=4)
    d_ff = serializers.IntegerField(min_value=1, default=512)
    patch_size = serializers.IntegerField(min_value=1, default=8)
    n_queries = serializers.IntegerField(min_value=1, default=32)
    qformer_depth = serializers.IntegerField(min_value=1, default=4)
    n_lang = serializers.IntegerField(min_value=1, default=16)
    init_std = serializers.FloatField(min_value=0.0, default=0.02)
    query_init_std = serializers.FloatField(min_value=0.0, default=0.02)
    norm_eps = serializers.FloatField(min_value=0.0, default=1e-5)
    rope_theta = serializers.FloatField(min_value=1.0, default=10000.0)
    beta_start = serializers.FloatField(min_value=0.0, max_value=1.0, default=1e-4)
    beta_end = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.02)
    freeze_language = serializers.BooleanField(default=False)
    bins = serializers.IntegerField(min_value=2, default=256)

    def validate(self, data):
        """Cross-field checks for attention width and the noise schedule."""
        if data['d'] % data['n_heads']:
            raise serializers.ValidationError({
                "n_heads": f"must divide d={data['d']}."
            })
        if (data['d'] // data['n_heads']) % 2:
            raise serializers.ValidationError({
                "n_heads": "d / n_heads must be even for rotary encoding."
            })
        if not 0.0 < data['beta_start'] <= data['beta_end'] < 1.0:
            raise serializers.ValidationError({
                "beta_end": "need 0 < beta_start <= beta_end < 1."
            })
        return data


class TrainConfigSerializer(serializers.Serializer):
    batch_size = serializers.IntegerField(min_value=1, default=64)
    steps = serializers.IntegerField(min_value=1, default=2000)
    lr_peak = serializers.FloatField(min_value=0.0, default=3e-4)
    warmup_steps = serializers.IntegerField(min_value=0, default=100)
    weight_decay = serializers.FloatField(min_value=0.0, default=0.01)
    betas = serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=1.0),
                                  min_length=2, max_length=2, default=[0.9, 0.999])
    seed = serializers.IntegerField(min_value=0, default=0)
    head_kind = serializers.ChoiceField(choices=HEAD_KINDS, default="incontext")
    H = serializers.IntegerField(min_value=1, default=16)
    n_frames = serializers.IntegerField(min_value=1, default=2)
    T_train = serializers.IntegerField(min_value=2, default=100)
    exec_steps = serializers.IntegerField(min_value=1, default=8)
    grad_clip = serializers.FloatField(min_value=0.0, default=1.0)
    lr_decay = serializers.BooleanField(default=True)
    lr_multipliers = serializers.DictField(child=serializers.FloatField(min_value=0.0), default=dict)
    augment_brightness = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.1)
    log_every = serializers.IntegerField(min_value=1, default=100)
    val_batches = serializers.IntegerField(min_value=0, default=8)
    workers = serializers.IntegerField(min_value=1, default=1)

    def validate_lr_peak(self, value):
        if value <= 0:
            raise serializers.ValidationError("Must be positive.")
        return value

    def validate_lr_multipliers(self, value):
        """Keys must name a parameter group."""
        unknown = sorted(set(value) - set(PARAM_GROUPS))
        if unknown:
            raise serializers.ValidationError(
                f"Unknown parameter groups {unknown}; expected a subset of {list(PARAM_GROUPS)}."
            )
        return value

    def validate(self, data):
        if data['warmup_steps'] >= data['steps']:
            raise serializers.ValidationError({
                "warmup_steps": "Must be smaller than steps."
            })
        if data['exec_steps'] > data['H']:
            raise serializers.ValidationError({
                "exec_steps": f"Cannot exceed the chunk length H={data['H']}."
            })
        return data


class RolloutConfigSerializer(serializers.Serializer):
    exec_steps = serializers.IntegerField(min_value=1, default=8)
    sampler = serializers.ChoiceField(choices=SAMPLERS, allow_null=True, default=None)
    T_eval = serializers.IntegerField(min_value=1, default=20)
    eta = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.0)
    n_episodes = serializers.IntegerField(min_value=1, default=100)
    seed = serializers.IntegerField(min_value=0, default=0)
    camera_split = serializers.ChoiceField(choices=CAMERA_SPLITS, default="test")
    workers = serializers.IntegerField(min_value=1, default=1)


class DatasetConfigSerializer(serializers.Serializer):
    tasks = serializers.ListField(child=serializers.ChoiceField(choices=TASK_KINDS), min_length=1,
                                  default=["pick"])
    episodes_per_task = serializers.IntegerField(min_value=1, default=100)
    cameras_per_traj = serializers.IntegerField(min_value=1, default=4)
    seed = serializers.IntegerField(min_value=0, default=0)
    camera_mode = serializers.ChoiceField(choices=CAMERA_MODES, default="pool")

    def validate_tasks(self, value):
        """Drop duplicates, keep first-seen order."""
        return list(dict.fromkeys(value))


class GridSerializer(serializers.Serializer):
    """
    Ablation grid: one list of values per swept axis, the task suite, and
    optional base sections for the model, training and rollout configs.
    """
    head = serializers.ListField(child=serializers.ChoiceField(choices=HEAD_KINDS), required=False)
    n_frames = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False)
    H = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False)
    k = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False)
    T_eval = serializers.ListField(child=serializers.IntegerField(min_value=1), required=False)
    tasks = serializers.ListField(child=serializers.ChoiceField(choices=TASK_KINDS + (CHAIN,)),
                                  min_length=1, default=["pick"])
    model = ModelConfigSerializer(required=False)
    train = TrainConfigSerializer(required=False)
    rollout = RolloutConfigSerializer(required=False)

    def validate_tasks(self, value):
        if CHAIN in value:
            raise serializers.ValidationError("Chains are evaluated with `eval --suite chain`, not in a grid.")
        return list(dict.fromkeys(value))

    def validate(self, data):
        T_train = data.get('train', {}).get('T_train', 100)
        too_many = [t for t in data.get('T_eval', []) if t > T_train]
        if too_many:
            raise serializers.ValidationError({
                "T_eval": f"Values {too_many} exceed T_train={T_train}."
            })
        return data


class RunConfigSerializer(serializers.Serializer):
    """A run config file: any of the model, train and rollout sections."""
    model = ModelConfigSerializer(required=False)
    train = TrainConfigSerializer(required=False)
    rollout = RolloutConfigSerializer(required=False)


def validate_config(serializer_class, data):
    """Validated data for `data`, or ConfigValidationError naming every bad field."""
    serializer = serializer_class(data=data)
    if not serializer.is_valid():
        raise ConfigValidationError(serializer.errors)
    return serializer.validated_data


def read_config(path):
    """Parse a JSON config file into a dict."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigValidationError({"config": [f"{path} is not valid JSON ({exc.msg}, line {exc.lineno})."]})
    if not isinstance(data, dict):
        raise ConfigValidationError({"config": [f"{path} must hold a JSON object."]})
    return data
