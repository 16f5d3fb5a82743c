"""
Position and channel attention on a toy feature map
===================================================

Builds a small feature map by hand, runs both attention modules on it and
prints the attention maps. Column j of each map says where output j reads
from, so every column sums to one.
"""

import numpy as np

from agpad import attention as A
from agpad.tensor import Tensor

np.set_printoptions(precision=4, suppress=True)

# two channels, one position: channel 0 is active, channel 1 is silent
a = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1), dtype=np.float64)
q = A.cam_attention_map(a)
print("channel map Q:\n", q.data)

# beta scales the attended term; beta=0 returns the input untouched
for beta in (0.0, 1.0):
    out = A.cam_forward(a, A.CamParams.init(np.float64, beta=beta))
    print(f"CAM output, beta={beta}:", out.data.ravel())

# one channel, two positions, all 1x1 kernels equal to one
pam = A.PamParams.init(1, 1, dtype=np.float64, alpha=1.0)
for w in (pam.conv_b_w, pam.conv_c_w, pam.conv_d_w):
    w.data[...] = 1.0
x = Tensor(np.array([[[1.0, 2.0]]]), dtype=np.float64)
print("position map P:\n", A.pam_attention_map(x, pam).data)
print("PAM output:", A.pam_forward(x, pam).data.ravel())

# a random 8-channel map: PAM commutes with shuffling positions
rng = np.random.default_rng(0)
feat = rng.standard_normal((8, 3, 3)).astype(np.float32)
pam8 = A.PamParams.init(8, reduction_ratio=4, rng=rng, alpha=0.7)
perm = rng.permutation(9)
shuffled = Tensor(feat.reshape(8, 9)[:, perm].reshape(8, 3, 3))
lhs = A.pam_forward(shuffled, pam8).data.reshape(8, 9)
rhs = A.pam_forward(Tensor(feat), pam8).data.reshape(8, 9)[:, perm]
print("max equivariance gap:", np.abs(lhs - rhs).max())

# the hierarchical block at the sizes of a 224 px DenseNet
shape = A.hierarchical_output_shape((512, 28, 28), (1024, 14, 14), (1024, 7, 7))
print("hierarchical output:", shape)
