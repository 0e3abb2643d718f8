from .formats import (decode_features, encode_features, load_slide, read_features, read_panel,
                      write_features, write_panel, write_slide)
from .neighborhoods import build_neighborhoods, median_nn_distance
from .preprocess import normalize_expression, panel_union, select_hvg, union_expression
from .synth import SynthConfig, SynthTruth, synth_tissue, synth_truth
from .types import FormatError, GenePanel, Neighborhood, PanelRegistry, SlideDataset, SpotRecord

__all__ = [
    "decode_features", "encode_features", "load_slide", "read_features", "read_panel",
    "write_features", "write_panel", "write_slide",
    "build_neighborhoods", "median_nn_distance",
    "normalize_expression", "panel_union", "select_hvg", "union_expression",
    "SynthConfig", "SynthTruth", "synth_tissue", "synth_truth",
    "FormatError", "GenePanel", "Neighborhood", "PanelRegistry", "SlideDataset", "SpotRecord",
]
