import sys
from pathlib import Path

import numpy as np

# make the shared oracle helpers importable from any test module
sys.path.insert(0, str(Path(__file__).parent))


def make_rectangle_pairs():
    """Four 64x64 synthetic pairs whose only change is one bright square.

    Squares sit on 16-px cell boundaries so the 4x4-grid toy head can
    represent the target exactly after bilinear upsampling. Returns
    TrainSamples with binary masks and one caption phrase each.
    """
    from scdkit.masks import ChangeMask
    from scdkit.training import TrainSample

    cells = [(0, 0), (1, 2), (2, 1), (3, 3)]
    phrases = ("red bench", "blue sign", "trash can", "wooden crate")
    samples = []
    for (row, col), phrase in zip(cells, phrases):
        base = np.full((64, 64, 3), 0.2, dtype=np.float32)
        base += np.linspace(0, 0.1, 64, dtype=np.float32)[None, :, None]
        after = base.copy()
        labels = np.zeros((64, 64), dtype=np.uint8)
        r0, c0 = row * 16, col * 16
        after[r0 : r0 + 16, c0 : c0 + 16] = 0.9
        labels[r0 : r0 + 16, c0 : c0 + 16] = 1
        samples.append(
            TrainSample(
                image_t0=base,
                image_t1=after,
                mask=ChangeMask(labels, num_classes=2),
                phrases=(phrase,),
            )
        )
    return samples
