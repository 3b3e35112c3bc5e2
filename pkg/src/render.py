import os

import cv2
import numpy as np

from utils import get_logger

logger = get_logger('bad-render')


def mask_image(allow, cell=16):
    """Allowed cells white, blocked cells black, one `cell`-pixel square per entry."""
    grid = (np.asarray(allow, dtype=bool) * 255).astype(np.uint8)
    return cv2.resize(grid, (grid.shape[1] * cell, grid.shape[0] * cell), interpolation=cv2.INTER_NEAREST)


def tone_map(frames):
    # [-1, 1] onto 0..255, clipped
    return (255 * (np.clip(frames, -1.0, 1.0) + 1.0) / 2.0).astype(np.uint8)


def frames_image(frames, cell=8):
    """Features along y, time along x, coloured heat map."""
    grey = tone_map(np.asarray(frames, dtype=np.float64).T)
    grey = cv2.resize(grey, (grey.shape[1] * cell, grey.shape[0] * cell), interpolation=cv2.INTER_NEAREST)
    return cv2.applyColorMap(grey, cv2.COLORMAP_VIRIDIS)


def write_mask(path, allow, cell=16):
    if not cv2.imwrite(path, mask_image(allow, cell)):
        raise OSError('could not write %s' % path)


def write_frames(directory, frames, prefix='sequence'):
    """One PNG per sequence of a (N, tau, D) batch; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for n, sequence in enumerate(frames):
        path = os.path.join(directory, '%s_%04d.png' % (prefix, n))
        if not cv2.imwrite(path, frames_image(sequence)):
            raise OSError('could not write %s' % path)
        paths.append(path)
    logger.info('wrote %d frame images to %s', len(paths), directory)
    return paths
