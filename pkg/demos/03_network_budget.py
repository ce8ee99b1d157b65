"""Size of the reconstruction network and how far each output voxel can see."""

from anomsal import network

for f in (8, 16, 24, 32):
    spec = network.ArchitectureSpec(n=16, f=f)
    print(f"f={f:2d}: {network.count_params(spec):>10,} parameters")

print()
print(network.param_report(network.ArchitectureSpec(n=16, f=24)))

# Each convolution widens the view by one voxel on each side, scaled by the
# resolution it runs at; the coarse bottleneck layers count four times.
print(f"receptive field: {network.receptive_field()} voxels per axis")
print("side lengths through the network:", network.ArchitectureSpec(n=32, f=8).side_lengths())
