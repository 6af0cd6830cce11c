"""Aggregation-tree multiple testing for two-cohort density differences."""

from .ingest import DataError, MarkerMatrix, quantile_normalize, read_matrix, read_two_cohorts
from .nulldist import DiscreteDist, LayeredNull, binomial_dist, build_layer_null
from .partition import (AdaptivePartitioner, LeafBinning, PartitionSpec, SequentialPartitioner,
                        build_partition)
from .team import TEAM, StoppingRule, TeamResult, find_threshold, run_team, run_team_counts

__all__ = [
    "AdaptivePartitioner", "DataError", "DiscreteDist", "LayeredNull", "LeafBinning",
    "MarkerMatrix", "PartitionSpec", "SequentialPartitioner", "StoppingRule", "TEAM",
    "TeamResult", "binomial_dist", "build_layer_null", "build_partition", "find_threshold",
    "quantile_normalize", "read_matrix", "read_two_cohorts", "run_team", "run_team_counts",
]
__version__ = "0.1.0"
