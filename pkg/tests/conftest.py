import numpy as np

from wtal.data_io import Dataset, FeatureSequence


def make_dataset(label_sets, num_classes, d=4, n=12, seed=0):
    rng = np.random.default_rng(seed)
    videos = [FeatureSequence(f"v{i:03d}", rng.normal(size=(n, d))) for i in range(len(label_sets))]
    return Dataset(videos, [frozenset(s) for s in label_sets],
                   [f"c{c}" for c in range(num_classes)])
