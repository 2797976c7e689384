"""
Serializers for the agentdice toolkit
=====================================
Input serializers validate command-line options and build the frozen config
objects; output serializers turn results into JSON-ready dicts.
"""
import math

from rest_framework import serializers

from .fusion import FusionConfig, FusionMode, TensorFilter, ZeroSignPolicy
from .partition import PartitionConfig
from .simulation import MagnitudeDist, SimConfig


# ============================================
# CONFIG SERIALIZERS
# ============================================

class FusionConfigSerializer(serializers.Serializer):
    """Merge options"""

    mode = serializers.CharField(default=FusionMode.FULL.value)
    beta = serializers.FloatField(default=1.0)
    delta = serializers.FloatField(required=False, allow_null=True, default=None, min_value=0.0)
    zero_sign_policy = serializers.ChoiceField(
        choices=[policy.value for policy in ZeroSignPolicy],
        default=ZeroSignPolicy.POSITIVE.value,
    )
    epsilon = serializers.FloatField(default=0.0, min_value=0.0)
    include = serializers.ListField(child=serializers.CharField(), default=list)
    exclude = serializers.ListField(child=serializers.CharField(), default=list)
    missing_tensors = serializers.ChoiceField(choices=['passthrough', 'error'], default='passthrough')

    def validate_mode(self, value):
        normalized = value.replace('-', '_')
        if normalized not in {mode.value for mode in FusionMode}:
            raise serializers.ValidationError(
                f"Mode must be one of: {', '.join(m.value.replace('_', '-') for m in FusionMode)}."
            )
        return normalized

    def validate_beta(self, value):
        if not (math.isfinite(value) and value > 0):
            raise serializers.ValidationError("Beta must be greater than 0.")
        return value

    def validate(self, data):
        tasks = self.context.get('tasks')
        if tasks and data.get('delta') is not None and data['delta'] > tasks:
            raise serializers.ValidationError({
                "delta": f"Delta must not exceed the number of tasks ({tasks})."
            })
        return data

    def create(self, validated_data):
        tensor_filter = TensorFilter(
            include=tuple(validated_data.pop('include')),
            exclude=tuple(validated_data.pop('exclude')),
        )
        return FusionConfig(tensor_filter=tensor_filter, **validated_data)


class SimConfigSerializer(serializers.Serializer):
    """Simulation options"""

    p = serializers.FloatField()
    k = serializers.IntegerField(min_value=1)
    trials = serializers.IntegerField(min_value=1, default=100_000)
    seed = serializers.IntegerField(min_value=0, default=0)
    delta = serializers.FloatField(required=False, allow_null=True, default=None, min_value=0.0)
    magnitudes = serializers.ChoiceField(choices=['unit', 'lognormal'], default='lognormal')
    mu = serializers.FloatField(default=0.0)
    sigma = serializers.FloatField(default=1.0, min_value=0.0)
    workers = serializers.IntegerField(min_value=1, default=1)

    def validate_p(self, value):
        if not 0.5 < value <= 1.0:
            raise serializers.ValidationError("p must exceed 0.5 and be at most 1.")
        return value

    def create(self, validated_data):
        magnitudes = MagnitudeDist(
            kind=validated_data.pop('magnitudes'),
            mu=validated_data.pop('mu'),
            sigma=validated_data.pop('sigma'),
        )
        return SimConfig(magnitudes=magnitudes, **validated_data)


class PartitionConfigSerializer(serializers.Serializer):
    """Partition options"""

    subsets = serializers.IntegerField(min_value=1)
    ratio = serializers.FloatField()
    seed = serializers.IntegerField(min_value=0, default=0)
    deterministic_order = serializers.BooleanField(default=False)

    def validate_ratio(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError("Training ratio must lie in (0, 1].")
        return value

    def create(self, validated_data):
        return PartitionConfig(**validated_data)


# ============================================
# FUSION REPORT SERIALIZERS
# ============================================

class ConsensusStatsSerializer(serializers.Serializer):
    """Branch counts, |S_i| histogram and weight entropy"""

    elements = serializers.IntegerField()
    branch_counts = serializers.DictField(child=serializers.IntegerField())
    active_set_histogram = serializers.DictField(child=serializers.IntegerField(), source='histogram')
    mean_weight_entropy = serializers.FloatField()
    updated_elements = serializers.IntegerField()


class ConsensusReportSerializer(serializers.Serializer):
    """Whole-merge report"""

    mode = serializers.CharField(source='mode.value')
    k = serializers.IntegerField()
    delta = serializers.FloatField()
    beta = serializers.FloatField()
    zero_sign_policy = serializers.CharField(source='zero_sign_policy.value')
    epsilon = serializers.FloatField()
    d = serializers.IntegerField()
    totals = ConsensusStatsSerializer()
    per_tensor = serializers.SerializerMethodField()
    passthrough = serializers.ListField(child=serializers.CharField())

    def get_per_tensor(self, obj):
        return {name: ConsensusStatsSerializer(stats).data for name, stats in obj.per_tensor.items()}


class PhaseTimingsSerializer(serializers.Serializer):
    """Overhead figures printed by `merge`"""

    header_seconds = serializers.FloatField()
    compute_seconds = serializers.FloatField()
    write_seconds = serializers.FloatField()
    wall_seconds = serializers.FloatField()
    tensors = serializers.IntegerField()
    fused_tensors = serializers.IntegerField()
    bytes_read = serializers.IntegerField()
    bytes_written = serializers.IntegerField()
    throughput_mb_s = serializers.FloatField()
    threads = serializers.IntegerField()


# ============================================
# SIMULATION SERIALIZERS
# ============================================

class SimResultSerializer(serializers.Serializer):
    p = serializers.FloatField()
    K = serializers.IntegerField(source='k')
    trials = serializers.IntegerField()
    seed = serializers.IntegerField()
    magnitudes = serializers.CharField()
    filtered_err = serializers.FloatField()
    avg_err = serializers.FloatField()
    exact_err = serializers.FloatField()
    hoeffding = serializers.FloatField()
    half_width = serializers.FloatField()
    avg_half_width = serializers.FloatField()


# ============================================
# ANALYSIS SERIALIZERS
# ============================================

class TensorSimilaritySerializer(serializers.Serializer):
    elements = serializers.IntegerField()
    l2 = serializers.FloatField()
    cosine = serializers.FloatField()
    sign_agreement = serializers.FloatField()
    param_hist_kl_ab = serializers.FloatField()
    param_hist_kl_ba = serializers.FloatField()


class SimilarityResultSerializer(serializers.Serializer):
    """Two-checkpoint comparison"""

    a = serializers.CharField()
    b = serializers.CharField()
    bins = serializers.IntegerField()
    alpha = serializers.FloatField()
    overall = TensorSimilaritySerializer()
    per_tensor = serializers.SerializerMethodField()

    def get_per_tensor(self, obj):
        return {name: TensorSimilaritySerializer(sim).data for name, sim in obj.per_tensor.items()}


class SimilarityMatrixSerializer(serializers.Serializer):
    """Pairwise metrics for heatmaps"""

    labels = serializers.ListField(child=serializers.CharField())
    bins = serializers.IntegerField()
    alpha = serializers.FloatField()
    values = serializers.DictField(
        child=serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    )


class ZScoreResultSerializer(serializers.Serializer):
    """Per-task Z-scores and AvgZ per method"""

    tasks = serializers.ListField(child=serializers.CharField())
    baseline_mean = serializers.ListField(child=serializers.FloatField(), source='mu')
    baseline_std = serializers.ListField(child=serializers.FloatField(), source='sigma')
    std_divisor = serializers.SerializerMethodField()
    methods = serializers.SerializerMethodField()

    def get_std_divisor(self, obj):
        return 'N'

    def get_methods(self, obj):
        return {
            method: {'z': dict(zip(obj.tasks, row)), 'avgz': avgz}
            for method, row, avgz in zip(obj.methods, obj.z, obj.avgz)
        }


class OverlapMatrixSerializer(serializers.Serializer):
    """Tool overlap between train subset (row) and test subset (column)"""

    basis = serializers.CharField()
    description = serializers.SerializerMethodField()
    counts = serializers.ListField(child=serializers.ListField(child=serializers.IntegerField()))
    percent = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))

    def get_description(self, obj):
        return "count = |train tools of row & test tools of col|; percent = 100 * count / |union of both|"
