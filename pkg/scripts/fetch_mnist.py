"""
scripts/fetch_mnist.py — download the four MNIST IDX files, gunzip, verify with the loader

Usage:
    python -m scripts.fetch_mnist
    python -m scripts.fetch_mnist --dir /custom/mnist --force
"""
from __future__ import annotations

import argparse
import gzip
import logging
import sys
import time
from pathlib import Path

import httpx

sys.path.insert(0, str(Path(__file__).parent.parent))

logging.basicConfig(
    level   = logging.INFO,
    format  = "%(asctime)s | %(levelname)s | %(message)s",
    datefmt = "%H:%M:%S",
)
logger = logging.getLogger(__name__)


def download(client: httpx.Client, url: str, target: Path) -> int:
    """Stream one .gz file and write it decompressed. Returns the decompressed size."""
    logger.info(f"Downloading {url}")
    with client.stream("GET", url) as response:
        response.raise_for_status()
        packed = b"".join(response.iter_bytes())
    raw = gzip.decompress(packed)
    tmp = target.with_suffix(".part")
    tmp.write_bytes(raw)
    tmp.replace(target)
    logger.info(f"  {target.name}: {len(packed):,} bytes packed, {len(raw):,} unpacked")
    return len(raw)


def fetch_mnist(root: Path, *, force: bool = False) -> dict[str, int]:
    """
    Full pipeline:
      1. Download each missing file (all of them with force)
      2. Decompress next to the others
      3. Load train and test splits to check the IDX headers and counts
    Returns the sample count per split.
    """
    from bcdtrain.config import get_settings
    from bcdtrain.data   import MNIST_FILES, load_mnist_idx

    settings = get_settings()
    root.mkdir(parents=True, exist_ok=True)

    # 1 + 2. Download and decompress
    with httpx.Client(timeout=settings.http_timeout, follow_redirects=True) as client:
        for name in MNIST_FILES.values():
            target = root / name
            if target.is_file() and not force:
                logger.info(f"  {name} already present, skipping")
                continue
            download(client, settings.mnist_base_url.rstrip("/") + f"/{name}.gz", target)

    # 3. Verify
    train = load_mnist_idx(root / MNIST_FILES["train_images"], root / MNIST_FILES["train_labels"])
    test  = load_mnist_idx(root / MNIST_FILES["test_images"],  root / MNIST_FILES["test_labels"])
    return {"train": train.n, "test": test.n}


def main():
    parser = argparse.ArgumentParser(description="Download the MNIST IDX files for bcdtrain")
    parser.add_argument(
        "--dir", type=str, default=None,
        help="Target directory (overrides BCD_MNIST_DIR in .env)",
    )
    parser.add_argument("--force", action="store_true", help="Re-download files that already exist")
    args = parser.parse_args()

    from bcdtrain.config import get_settings
    settings = get_settings()
    root     = Path(args.dir) if args.dir else Path(settings.mnist_dir)

    print()
    print("═" * 62)
    print("  BCDTRAIN — MNIST download")
    print("═" * 62)
    print(f"  Target : {root.resolve()}")
    print(f"  Mirror : {settings.mnist_base_url}")
    print("═" * 62)
    print()

    start   = time.time()
    try:
        counts = fetch_mnist(root, force=args.force)
    except (httpx.HTTPError, OSError) as e:
        logger.error(f"Download failed: {e}")
        sys.exit(2)
    elapsed = time.time() - start

    print()
    print("═" * 62)
    print("DOWNLOAD COMPLETE")
    print("═" * 62)
    print(f"  Train samples : {counts['train']:,}")
    print(f"  Test samples  : {counts['test']:,}")
    print(f"  Time taken    : {elapsed:.1f}s")
    print("═" * 62)
    print()
    print("Run the desk-scale comparison:")
    print("   python -m bcdtrain.main compare configs/mnist_desk.cfg")
    print()


if __name__ == "__main__":
    main()
