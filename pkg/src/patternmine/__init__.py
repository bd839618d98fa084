"""Near-duplicate visual pattern discovery over multi-scale feature grids.

The package splits into feature storage (AMFP pyramids), dense matching,
correspondence mining, adapter training, geometric verification, corpus
discovery/clustering, evaluation, and a CLI with static HTML reports.
"""

from .discovery import (Cluster, DiscoveryConfig, RegionGraph, RegionNode,
                        build_graph, clusters_to_json, dense_correspondences,
                        discover_all_pairs, discover_pair, extract_clusters,
                        localize_by_discovery, pairs_from_json, pairs_to_json)
from .evaluation import (Annotation, EvalConfig, average_precision,
                         detection_map, iou, ltll_accuracy, read_annotations,
                         retrieval_map, write_annotations)
from .features import (AMFP_MAGIC, AMFP_VERSION, BUILTIN_CHANNELS,
                       CELL_STRIDE_PX, DEFAULT_BASE_MAX_DIM, FeatureMap,
                       FeaturePyramid, FormatError, GridPos,
                       ImageManifestEntry, builtin_extract, default_scales,
                       l2_normalize_map, normalize_pyramid, read_manifest,
                       read_pyramid_file, write_manifest, write_pyramid_file)
from .geometry import (AffineTransform, Correspondence, HoughBin,
                       ScoredPair, ScoringConfig, bounding_box, hough_vote,
                       ransac_affine, reprojection_errors, score_pair)
from .matching import (Detection, Match, QueryPatch, SimilarityMap,
                       benchmark_matching, box_iou,
                       dense_similarity, extract_detect_query, nms,
                       one_shot_detect, query_from_pyramid, top_k_matches)
from .mining import (CandidateMatch, FeatureRef, MiningConfig, MiningRound,
                     PositivePair, ProposalRegion, generate_positive_pairs,
                     mine_negatives, mine_round, propose_candidate,
                     sample_proposals, select_verified, verify_candidate)
from .training import (AdamState, AdapterParams, LossConfig, TrainHistory,
                       TripletEntry, adam_step, adapt_pyramid, apply_adapter,
                       batch_from_round, load_checkpoint, save_checkpoint,
                       train, triplet_loss, triplet_loss_grad)

__version__ = "0.1.0"
