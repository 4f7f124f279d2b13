from .augment import (
    AugmentSpec,
    augment_pair,
    augment_volume,
    flip_volume,
    rotate_volume,
    shift_volume,
)
from .manifest import SubjectRecord, Visit, load_dataset, load_volumes, write_manifest
from .pairs import VisitPair, make_batches, make_pairs, rng_for
from .phantom import (
    PhantomConfig,
    PhantomResult,
    TruthRow,
    lesion_mask,
    synthesize_phantoms,
    write_phantom,
)
from .volumes import (
    Volume,
    load_volume_file,
    save_volume_file,
    zscore,
    zscore_array,
)

__all__ = [
    "AugmentSpec",
    "PhantomConfig",
    "PhantomResult",
    "SubjectRecord",
    "TruthRow",
    "Visit",
    "VisitPair",
    "Volume",
    "augment_pair",
    "augment_volume",
    "flip_volume",
    "lesion_mask",
    "load_dataset",
    "load_volume_file",
    "load_volumes",
    "make_batches",
    "make_pairs",
    "rng_for",
    "rotate_volume",
    "save_volume_file",
    "shift_volume",
    "synthesize_phantoms",
    "write_manifest",
    "write_phantom",
    "zscore",
    "zscore_array",
]
