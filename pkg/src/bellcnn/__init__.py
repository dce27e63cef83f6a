"""BellCNN: a from-scratch CNN training/inference engine for binary
grayscale image classification, with CDR-based study-data wrangling,
freeze/thaw model serialization, and final-layer transfer retraining.
"""

from .tensor import ConvGeometry, Shape, Tensor, conv_out_dims, flatten, reshape
from .layers import (
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    LayerGradients,
    Mode,
    PoolLayer,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    dropout_forward,
    maxpool_backward,
    maxpool_forward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
)
from .optim import AdamHyper, AdamState, adam_step, cross_entropy, softmax_cross_entropy
from .model import (
    BellConfig,
    ModelGraph,
    backward,
    build_bellcnn,
    forward,
    loss_and_gradients,
    predict,
)
from .data import (
    DatasetSplit,
    LabeledExample,
    ManifestEntry,
    SubjectRecord,
    label_from_cdr,
    load_image,
    one_hot,
    parse_metadata_csv,
    read_manifest,
    shuffle_split,
    write_manifest,
)
from .freeze import freeze, thaw
from .transfer import (
    BottleneckStore,
    BottleneckVector,
    FeatureTrunk,
    HeadModel,
    cache_bottlenecks,
    infer_scores,
    train_head,
    trunk_from_graph,
)
from .training import (
    CsvSummarySink,
    ListSink,
    TrainConfig,
    TrainingSummaryRow,
    evaluate,
    fit_model,
    read_summary,
    smooth_series,
)

__version__ = "0.1.0"
