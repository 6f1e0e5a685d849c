"""Face personalization and fine-grained attribute editing toolkit.

Conditions a text-to-image denoiser on StyleGAN W+ latents through a
timestep-conditioned latent adaptor; supports subject embedding, LoRA subject
tuning, continuous attribute edits, identity interpolation, and mask-merged
multi-subject composition. All pretrained models sit behind pluggable
backends; the deterministic toy backend makes everything verifiable at desk
scale.
"""

__version__ = "0.1.0"

from .adaptor import AdaptorConfig, LatentAdaptor, TokenEmbeddingPair, TokenEmbeddingSchedule, positional_encode
from .backends import BackendBundle, load_bundle, make_toy_bundle, resolve_bundle
from .latent import (
    DirectionCatalog,
    EditDirection,
    EditRequest,
    WPlusLatent,
    combine_directions,
    edit_latent,
    extract_direction,
    interpolate,
)
from .lora import LoRADelta, lora_effective
from .losses import (
    DiffusionLatent,
    LossWeights,
    NoiseSchedule,
    ddim_x0,
    diffusion_loss,
    id_loss,
    reg_loss,
    total_loss,
)
from .pipeline import (
    GenerationConfig,
    GenerationTrace,
    PromptTemplate,
    assemble_conditioning,
    edit_generate,
    generate,
    interpolation_strip,
)
from .composition import (
    CompositionPlan,
    InstanceMaskSet,
    compose,
    derive_masks,
    merge_latents,
)
from .evaluation import (
    EvalReport,
    delta_clip,
    evaluate_personalization,
    identity_similarity,
    prompt_similarity,
)
from .training import (
    PairedSample,
    SubjectProfile,
    TuneConfig,
    embed_subject,
    pretrain,
    tune_subject,
)
