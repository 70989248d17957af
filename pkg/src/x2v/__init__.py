"""x2v: intrinsic-channel video rendering at desk scale.

Hybrid self-attention (self + reference + multi-head-full temporal) and
masked cross-attention inside a v-prediction video diffusion model, driven
by recursive long-video sampling, with a synthetic room simulator supplying
exact intrinsic-channel ground truth.
"""

from .attention import (AttentionMode, HybridAttentionWeights, LowRankAdapter,
                        hybrid_forward, interpolation_mode, keyframe_mode,
                        mhf_temporal_attention, reference_attention, self_attention)
from .crossattn import (MaskedCrossAttention, PromptEmbedding, RegionMask,
                        cross_attention, downsample_mask, masked_cross_attention)
from .diffusion import (DiffusionBatch, MomentumSGD, NoiseSchedule, add_noise,
                        alpha_bar, ddim_step, ddim_timesteps, dropout_conditions,
                        training_step, v_target, x0_from_v)
from .kernel import Rng, gaussian_noise, linear, matmul, multi_head_attention, softmax_rows
from .metrics import EvalReport, psnr, temporal_consistency
from .net import (IntrinsicStack, ModelConfig, ReferenceArray, VideoDenoiser,
                  assemble_input, pad_reference)
from .pipeline import RunConfig, VideoConditions, sample_video, train_model
from .sampler import (ModelCall, SamplingPlan, build_schedule, call_count,
                      dependency_depth, execute, sequential_schedule)
from .scene import (CameraPose, SceneSpec, Trajectory, count_visible,
                    generate_scene, motion_stats, next_pose, object_masks,
                    render_intrinsics, sample_trajectory, shade)

__version__ = "0.1.0"
