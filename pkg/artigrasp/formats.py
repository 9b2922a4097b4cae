"""
On-disk formats shared by the pipeline stages.

Every writer is deterministic: JSON is dumped with sorted keys, binary blobs
are little-endian ``float32`` and nothing carries a timestamp, so rerunning a
stage with the same seed reproduces its files byte for byte.
"""

import json
import os

import imageio.v3 as iio
import numpy as np


def ensure_dir(path):
    if path and not os.path.isdir(path):
        os.makedirs(path)
    return path


def dumps(data):
    return json.dumps(data, sort_keys=True, indent=1) + "\n"


def write_json(path, data):
    with open(path, "w") as f:
        f.write(dumps(data))


def read_json(path):
    with open(path) as f:
        return json.load(f)


def write_jsonl(path, records):
    """One JSON object per line, keys sorted."""
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")


def read_jsonl(path):
    records = []
    with open(path) as f:
        for number, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except ValueError as e:
                raise ValueError("%s:%d: invalid JSON line (%s)" % (path, number, e))
    return records


def write_pfm(path, image):
    """Write a single-channel portable float map (little-endian, rows stored
    bottom to top).

    See also:
        * PFM format: http://www.pauldebevec.com/Research/HDR/PFM/
    """
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError("PFM writer expects a 2D map, got shape %r" % (image.shape,))
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (width, height))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValueError("%s: not a grayscale PFM file (magic %r)" % (path, magic))
        width, height = [int(v) for v in f.readline().split()]
        scale = float(f.readline().strip())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    if data.size != width * height:
        raise ValueError("%s: expected %d floats, found %d" % (path, width * height, data.size))
    return data.reshape(height, width)[::-1].astype(np.float64)


def write_pgm(path, mask):
    """Instance mask as an 8-bit PGM (instance ids must be < 256)."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("instance ids must lie in [0, 255] for PGM masks")
    iio.imwrite(path, mask.astype(np.uint8), extension=".pgm")


def read_pgm(path):
    return np.asarray(iio.imread(path, extension=".pgm"), dtype=np.int64)


def write_png(path, image):
    """Write a float map in ``[0, 1]`` (or already 8-bit) as PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    iio.imwrite(path, image, extension=".png")


def write_blob(prefix, array, header):
    """Write ``<prefix>.bin`` (float32 LE) and its ``<prefix>.json`` sidecar.

    The sidecar holds ``header`` plus the array ``shape``.
    """
    array = np.asarray(array, dtype="<f4")
    header = dict(header, shape=list(array.shape))
    write_json(prefix + ".json", header)
    with open(prefix + ".bin", "wb") as f:
        f.write(np.ascontiguousarray(array).tobytes())


def read_blob(prefix):
    header = read_json(prefix + ".json")
    shape = tuple(header["shape"])
    with open(prefix + ".bin", "rb") as f:
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError("%s.bin: expected %d floats, found %d" % (prefix, int(np.prod(shape)), data.size))
    return header, data.reshape(shape).astype(np.float64)


def write_obj(path, vertices, faces):
    """Wavefront OBJ with 1-based face indices."""
    with open(path, "w") as f:
        for v in vertices:
            f.write("v %.6f %.6f %.6f\n" % tuple(v))
        for face in faces:
            f.write("f %d %d %d\n" % tuple(int(i) + 1 for i in face))


def read_obj(path):
    vertices, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(v.split("/")[0]) - 1 for v in parts[1:4]])
    return np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
