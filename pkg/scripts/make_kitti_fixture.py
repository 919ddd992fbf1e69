"""Build the 5-frame KITTI-layout test fixture from synthetic scenes and checksum it.

    python scripts/make_kitti_fixture.py tests/fixtures/kitti_mini
"""

import argparse
import hashlib
from pathlib import Path

from lidarcam.data_io.kitti import write_kitti_frame
from lidarcam.data_io.synthetic import SyntheticSceneSpec, generate_synthetic

FIXTURE_SPEC = dict(rings=48, azimuth_step=0.6, image_hw=(96, 192), scene_range=10.0)


def checksum_lines(root: Path) -> list[str]:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "SHA256SUMS")
    return [f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.relative_to(root).as_posix()}" for p in files]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="tests/fixtures/kitti_mini")
    ap.add_argument("--frames", type=int, default=5)
    args = ap.parse_args()
    root = Path(args.out)
    for i in range(args.frames):
        sample = generate_synthetic(SyntheticSceneSpec(seed=100 + i, **FIXTURE_SPEC))
        write_kitti_frame(root, "00", i, sample)
        print(f"frame {i}: {len(sample.cloud)} points")
    (root / "SHA256SUMS").write_text("\n".join(checksum_lines(root)) + "\n")


if __name__ == "__main__":
    main()
