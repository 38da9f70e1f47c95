"""Regenerate golden_embedding.npy from the exact-mode pipeline."""

from pathlib import Path

import numpy as np

from scatgen.data import generate_polygon5
from scatgen.embedding import embed, fit_whitening
from scatgen.scattering import scatter_array
from scatgen.wavelet_bank import build_filter_bank

bank = build_filter_bank(3, 4, 32)
train = np.stack(generate_polygon5(128, 32, 3))
w = fit_whitening(scatter_array(train, bank), d=64)
z = embed(generate_polygon5(1, 32, 99)[0], bank, w)
np.save(Path(__file__).with_name("golden_embedding.npy"), z)
