"""Layered peel-map rendering, garment reconstruction, UV unwrapping and texture baking."""
from .core import (FILL, DEFAULT_LAYERS, MAX_LAYERS, DimensionMismatch, EmptyInput, InvalidStack,
                   LabeledPointCloud, LayeredMesh, NonPositiveDepth, PeelError, PeelStack,
                   PinholeCamera, PointBehindCamera, TriMesh, Violation, project, unproject,
                   validate_stack)
from .render import EmptyScene, Scene, peel_render, render_normal_map
from .reconstruct import (backproject, extract_garment, meshify_layer, merge_layers,
                          reconstruct_label, stitch_gaps)
from .seams import AllVerticesFill, Partition, assign_layers, estimate_seams, split_partitions
from .flatten import (CannotFit, FlippedTriangles, NonDiskTopology, SolverSingular, UVAtlas,
                      UVChart, conformal_flatten, flatten_partitions, pack_atlas)
from .texture import (CameraMismatch, MissingPatch, NoBoundary, TextureImage, ValidityMask, bake,
                      dilate_gutter, inpaint)
from .metrics import (LossWeights, NotADistribution, PAPER_WEIGHTS, DRAFT_WEIGHTS, iou, l_depth,
                      l_norm, l_rgb, l_seg, nre, p2s, total_loss)
from .fixtures import UnknownFixture, make_scene
from .pipeline import RunManifest, StageFailed, make_fixture, run_roundtrip

__version__ = "0.1.0"
