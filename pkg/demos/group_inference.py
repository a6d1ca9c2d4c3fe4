"""Joint inference over any number of input scans.

The group U-Net shares one set of weights across group members, so the same
network accepts one, two or more aligned scans. Reordering the inputs or
repeating a scan does not change the prediction.
"""

import numpy as np
import torch

from groupseg.core import GridSpec
from groupseg.net import GroupUNet, parameter_count, segment
from groupseg.phantom import phantom_session


def main():
    torch.manual_seed(0)
    net = GroupUNet(levels=3, features=8, seed=0)
    print("parameters:", parameter_count(net))

    a, b = torch.rand(1, 1, 16, 16, 16), torch.rand(1, 1, 16, 16, 16)
    with torch.no_grad():
        ab, ba = net(torch.cat([a, b])), net(torch.cat([b, a]))
        one, twice = net(a), net(torch.cat([a, a]))
    print("max |f(a,b) - f(b,a)|:", float((ab - ba).abs().max()))
    print("max |f(a) - f(a,a)|:  ", float((one - twice).abs().max()))

    session = phantom_session(seed=0, shape=(40, 40, 40), spacing=(4.0, 4.0, 4.0))
    scan = session.images[0]
    grid = GridSpec((16, 16, 16), (10.0, 10.0, 10.0), "LIA")
    single = segment(net, [scan], grid)
    pair = segment(net, [scan, scan], grid)
    print("segment shape:", single.shape, "identical for (x) and (x, x):", np.array_equal(single.data, pair.data))


if __name__ == "__main__":
    main()
