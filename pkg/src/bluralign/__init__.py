"""EEG-to-image alignment with adaptive blurring, EEG-query fusion and frequency-band screening."""
from .align import (
    CalibrationStats,
    SimilarityBatch,
    batch_stats,
    boundary_loss,
    clip_contrastive_loss,
    cosine_similarity_matrix,
    overall_loss,
    upper_quantile,
)
from .blur import BlurConfig, center_blur, center_weight_map, compute_saliency, gaussian_blur, saliency_blur
from .diffcore import AdamState, GradCheckReport, ParamStore, ShapeMismatchError, adam_step, fd_gradient_check
from .encoders import EEGEncoder, FrozenVisualEncoder, eeg_encode, visual_encode
from .estimators import (
    BandPassFilter,
    BandScreenTransformer,
    CenterBlur,
    NeuralVisualRetriever,
    SaliencyBlur,
)
from .fusion import attention_map, attention_scores, fuse, linear_fuse, mask_fuse, pixel_keys
from .pipeline import (
    Dataset,
    RetrievalReport,
    SynthConfig,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    evaluate_retrieval,
    synth_dataset,
    train,
)
from .spectral import BandSpec, SubBandSet, decompose_bands, fuse_bands, selection_entropy, selection_weights

__version__ = "0.1.0"
