"""Augmentation selection statistics, t-SNE and report outputs."""

from gslab.analysis.embed import export_embeddings
from gslab.analysis.report import scatter_svg, write_points_csv, write_report
from gslab.analysis.stats import AugRunTable, paired_t_test, select_top_k
from gslab.analysis.tsne import TsneConfig, TsneResult, silhouette, tsne

__all__ = [
    "AugRunTable", "TsneConfig", "TsneResult", "export_embeddings", "paired_t_test", "scatter_svg",
    "select_top_k", "silhouette", "tsne", "write_points_csv", "write_report",
]
