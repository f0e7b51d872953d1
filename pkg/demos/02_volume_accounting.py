"""Communication-volume accounting at published dataset scales.

Prints the standard-vs-learned volume table and the entropy upper bound
of the sparse mask, i.e. how many bits the retained positions and codes
could possibly need.
"""

from ibcomm import codec, harness


def main():
    print(f"{'dataset / dims':<24} {'method':<10} {'bytes':>12} {'display':>12}")
    for row in harness.volume_table():
        print(f"{row['dataset_dims']:<24} {row['method']:<10} "
              f"{row['bytes']:>12,.0f} {row['human_readable']:>12}")

    print("\nmask entropy upper bound, log2 C(HW, k) + k*b:")
    for (h, w, alpha, b) in [(200, 704, 0.1, 4), (100, 352, 0.1, 4),
                             (64, 64, 0.1, 4)]:
        k = codec.retained_positions(alpha, h, w)
        bound_bits = codec.entropy_bound(h, w, k, b)
        naive_bits = k * (32 + b)  # u32 index + code per retained cell
        print(f"  {h}x{w}, k={k}, b={b}: bound {bound_bits / 8:,.0f} B "
              f"vs naive index+code {naive_bits / 8:,.0f} B")


if __name__ == "__main__":
    main()
