# global import
from .errors import CkSeuError
from .half16_codec import Half16, decode_half, encode_half, flip_bit, critical_flip_amplification, CRITICAL_BIT
from .checkpoint_store import CkCheckpointStore, parse_checkpoint, write_checkpoint, load_checkpoint, save_checkpoint, bit_statistics, checksum
from .naming_scheme import TensorSelector, NamingScheme, BlockKind, LayerKind, MatrixRole, resolve_selector
from .toy_diffusion_model import CkToyDiffuser, DiffuserConfig, Generation, attention, ffn
from .fault_injector import InjectionSpec, InjectionRecord, UniformRandom, Explicit, inject, revert, derive_trial_seed
from .quality_metrics import MetricName, clip_like_score, toy_image_embed, corruption_stats
from .campaign_runner import CkCampaignRunner, CampaignConfig, CampaignResult, BUNDLED_PROMPTS, recompute_aggregates
from .config import load_config
from .reports import emit_results, load_result, summary_table, export_images, RunManifest
from .util import prep_logging
