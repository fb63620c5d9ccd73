"""A few gradients computed by hand and by the engine, side by side."""

import numpy as np

from signattack import autodiff as ad
from signattack.autodiff import Tensor
from signattack.gradcheck import OP_KINDS, grad_check

# d(x^2)/dx = 2x
x = Tensor([3.0], requires_grad=True)
ad.backward(ad.sum_all(ad.square(x)))
print("d/dx x^2 at 3:", x.grad)

# cross-entropy gradient is softmax minus one-hot
z = Tensor(np.array([[2.0, -1.0, 0.5]]), requires_grad=True)
ad.backward(ad.softmax_cross_entropy(z, [0]))
print("CE grad:      ", z.grad.round(4))
print("softmax - e0: ", (ad.softmax(z.data) - [1, 0, 0]).round(4))

# every operator against central differences
for kind in OP_KINDS:
    print(f"{kind:24s} {grad_check(kind, seed=0):.1e}")
