"""
Wavelet reconstruction constants

Prints the calibrated full-band reconstruction constant for each supported
wavelet type. The values are derived at runtime; this script only reports them.
"""

import logging

from scripts.dsp_kernels import WaveletType, calibration_frequency, reconstruction_constant

logger = logging.getLogger(__name__)


def calibration_table() -> dict[str, dict[str, float]]:
    return {
        w.value: {
            "omega_rad_per_sample": calibration_frequency(w),
            "constant": reconstruction_constant(w),
        }
        for w in WaveletType
    }


def main():
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)8s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    for name, row in calibration_table().items():
        logger.info(f"{name:>5}: C = {row['constant']:.6f} (tone at {row['omega_rad_per_sample']:.5f} rad/sample)")


if __name__ == "__main__":
    main()
