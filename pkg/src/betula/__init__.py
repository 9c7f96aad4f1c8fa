"""Numerically stable CF-trees (BETULA) next to the original BIRCH clustering features."""
from .estimators import CFGaussianMixture, CFTreeSummarizer, GaussianMixtureEM
from .features import (BetulaFeature, BirchFeature, betula_variance, birch_variance,
                       lift_point, lift_point_birch, merge_betula, merge_birch)
from .gmm import (MixtureModel, em_fit_birch_features, em_fit_features, em_fit_points,
                  kmeanspp_init, log_likelihood)
from .metrics import (AbsorptionKind, DistanceKind, MetricForm, absorb_betula, absorb_birch,
                      dist_betula, dist_birch)
from .tree import CFTree, TreeConfig

__version__ = "0.1.0"
