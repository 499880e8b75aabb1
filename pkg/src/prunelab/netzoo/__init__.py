from .network import (
    LayerParams,
    Network,
    build_network,
    expected_shapes,
    parameter_count,
    remove_filters,
    widen_layer,
)
from .spec import (
    ARCHITECTURES,
    Conv,
    Dense,
    Flatten,
    MaxPool,
    NetworkSpec,
    ReLU,
    SpecError,
    mini_a,
    mini_v,
)
