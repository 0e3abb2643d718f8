from .de import DEResult, bh_adjust, ora_hypergeom, rank_sum_test, wilcoxon_de
from .kmeans import ClusterResult, kmeans, pca
from .metrics import Contingency, asw, chaos, contingency, external_metrics, knn_indices, pas, spatial_metrics

__all__ = [
    "ClusterResult", "Contingency", "DEResult", "asw", "bh_adjust", "chaos", "contingency",
    "external_metrics", "kmeans", "pca", "knn_indices", "ora_hypergeom", "pas", "rank_sum_test",
    "spatial_metrics", "wilcoxon_de",
]
