"""Feedforward text-to-3D at desk scale.

A text prompt conditions an attention/convolution decoder that emits a
triplane feature field; a differentiable volume renderer turns the field into
images; score distillation against a pluggable denoising oracle trains the
decoder amortized over a prompt set.  Everything runs on numpy with a small
reverse-mode tape.
"""

from .autodiff import (Graph, ShapeError, Tensor, grad_check,
                       tensor_from_bytes, tensor_to_bytes)
from .conditioner import (DecoderConfig, TextCondition, build_decoder_params,
                          decode, desk_decoder_config, paper_decoder_config)
from .evalkit import EvalReport, clip_rp, evaluate, views_pp
from .guidance import (DiffusionSchedule, DownsampleFeature, GuidanceConfig,
                       OracleError, RemoteImageEncoder, RemoteOracle,
                       SeverityState, SyntheticOracle, adaptive_w_neg,
                       cfg_predict, clip_loss, forward_diffuse,
                       perp_neg_predict, sds_grad, severity, view_prompts)
from .prompts import (PromptRecord, SyntheticEmbedder, embed, gen_animals,
                      gen_portraits, read_jsonl, split, target_scene,
                      write_jsonl)
from .renderer import (AnnealState, CameraPose, RenderOutput, anneal_step,
                       composite, generate_rays, query_field, render,
                       sample_camera, sample_points, scaled_sigmoid)
from .rng import RngHierarchy
from .trainer import (CheckpointError, TrainConfig, Trainer, load_trainer,
                      read_checkpoint, save_checkpoint)
from .triplane import Triplane, init_triplane, sample_features

__version__ = "0.1.0"

__all__ = [
    "AnnealState", "CameraPose", "CheckpointError", "DecoderConfig",
    "DiffusionSchedule", "DownsampleFeature", "EvalReport", "Graph",
    "GuidanceConfig", "OracleError", "PromptRecord", "RemoteImageEncoder",
    "RemoteOracle", "RenderOutput", "RngHierarchy", "SeverityState",
    "ShapeError", "SyntheticEmbedder", "SyntheticOracle", "Tensor",
    "TextCondition", "TrainConfig", "Trainer", "Triplane", "adaptive_w_neg",
    "anneal_step", "build_decoder_params", "cfg_predict", "clip_loss",
    "clip_rp", "composite", "decode", "desk_decoder_config", "embed",
    "evaluate", "forward_diffuse", "gen_animals", "gen_portraits",
    "generate_rays", "grad_check", "init_triplane", "load_trainer",
    "paper_decoder_config", "perp_neg_predict", "query_field",
    "read_checkpoint", "read_jsonl", "render", "sample_camera",
    "sample_features", "sample_points", "save_checkpoint", "scaled_sigmoid",
    "sds_grad", "severity", "split", "target_scene", "tensor_from_bytes",
    "tensor_to_bytes", "view_prompts", "views_pp", "write_jsonl",
]
