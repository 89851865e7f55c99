"""Few-shot adaptation of attention-pooled dense features.

The library fine-tunes a single attention pooling layer over frozen dense
feature maps, blends its output with the frozen original layer at
inference time, and optionally augments class scores with a key-value
cache built from the few-shot training set. It also ships a dense-feature
semantic correspondence tool, a portable binary tensor container, and a
synthetic planted-parts benchmark generator.
"""

from .attnpool import (AttnPoolGrads, AttnPoolParams, DenseFeatureMap,
                       attn_backward, attn_forward, attn_weights, mean_feature)
from .cache import (CacheModel, build_cache, load_cache, phi, safe_a_logits,
                    safe_a_logits_batch, save_cache, tune_cache_hparams)
from .correspondence import PixelPoint, export_heatmap, match_point, upsample
from .errors import (CapacityError, ConfigError, DataError,
                     DegenerateFeatureError, DimensionError, SafepoolError,
                     TensorFormatError)
from .inference import (BlendConfig, Classifier, EvalResult, blend,
                        class_logits, evaluate)
from .store import (DatasetManifest, FewShotSet, SampleRecord, gen_synthetic,
                    load_attnpool, read_tensor, sample_k_shot, save_attnpool,
                    write_tensor)
from .trainer import (FewShotData, OptimState, TrainConfig, TrainReport,
                      adamw_step, cosine_lr, grid_search, train_safe)

__version__ = "0.1.0"
