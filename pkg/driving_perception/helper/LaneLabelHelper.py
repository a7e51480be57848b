import logging
import os

import cv2
import numpy as np

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import ImageReadError, InvalidInputError

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

# 33 active cells, identical to cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (7, 7))
STRUCTURING_ELEMENT_7 = np.array([
    [0, 0, 0, 1, 0, 0, 0],
    [0, 1, 1, 1, 1, 1, 0],
    [1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 1, 1, 1],
    [0, 1, 1, 1, 1, 1, 0],
    [0, 0, 0, 1, 0, 0, 0],
], dtype=np.uint8)

MASK_EXTENSIONS = ('.png',)


def as_binary(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidInputError(f"expected a 2D mask, got shape {mask.shape}")
    return (mask > 0).astype(np.uint8)


def dilate_mask(mask, element=STRUCTURING_ELEMENT_7):
    """
    Binary dilation with a zero-padded border; the result always contains the input.
    """
    binary = as_binary(mask)
    return cv2.dilate(binary, np.asarray(element, dtype=np.uint8), iterations=1,
                      borderType=cv2.BORDER_CONSTANT, borderValue=0)


def line_width_profile(mask, axis=0):
    """
    Thickness of every foreground run along ``axis`` (0: down the columns,
    1: along the rows), one list per cross-section.
    """
    binary = as_binary(mask)
    lines = binary.T if axis == 0 else binary
    profile = []
    for line in lines:
        padded = np.concatenate([[0], line, [0]])
        edges = np.flatnonzero(np.diff(padded))
        profile.append((edges[1::2] - edges[::2]).tolist())
    return profile


def read_mask(path):
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise ImageReadError(f"cannot read mask {path}")
    return as_binary(image)


def write_mask(path, mask):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not cv2.imwrite(str(path), as_binary(mask) * 255):
        raise ImageReadError(f"cannot write mask {path}")


class LaneLabelHelper:
    logger = logging.getLogger('LaneLabelHelper')

    def __init__(self, element=STRUCTURING_ELEMENT_7):
        self.element = np.asarray(element, dtype=np.uint8)

    def dilate(self, mask):
        return dilate_mask(mask, self.element)

    def dilate_directory(self, in_dir, out_dir):
        """
        Dilate every PNG mask in ``in_dir`` into ``out_dir`` under the same name.

        :return: number of masks written
        """
        if not os.path.isdir(in_dir):
            raise InvalidInputError(f"mask directory {in_dir} does not exist")
        os.makedirs(out_dir, exist_ok=True)
        written = 0
        for name in sorted(os.listdir(in_dir)):
            if not name.lower().endswith(MASK_EXTENSIONS):
                continue
            try:
                mask = read_mask(os.path.join(in_dir, name))
            except ImageReadError as e:
                self.logger.warning(e)
                continue
            write_mask(os.path.join(out_dir, name), self.dilate(mask))
            written += 1
        self.logger.info('Dilated %s lane masks from %s into %s', written, in_dir, out_dir)
        return written
