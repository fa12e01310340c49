"""Print output geometry and parameter counts of the network configurations."""

from cascade3d.network import DESK_SPEC, FULL_SPEC, UNetSpec, parameter_count
from cascade3d.network.unet import parameter_shapes


def main():
    for name, d in (("full", FULL_SPEC), ("desk", DESK_SPEC)):
        spec = UNetSpec.from_dict(d)
        print(f"{name}: levels {spec.levels}, base {spec.base_channels}, classes {spec.num_classes}, "
              f"input {spec.input_tile} -> output {spec.output_tile}, "
              f"{parameter_count(spec):,} parameters")
    print()
    for k, s in parameter_shapes(UNetSpec.from_dict(DESK_SPEC)).items():
        print(f"  {k:<16} {s}")


if __name__ == "__main__":
    main()
