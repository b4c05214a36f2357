import csv
import json
import os
import struct
from collections import OrderedDict
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from helpers.errors import DatasetError
from triplane_data_classes import DatasetManifest, ManifestRow


class FileHelper:
    TRAIN_FOLDER = "train"
    CUE_CONFLICT_FOLDER = "cueconflict"
    ERROR_FOLDER = "errors"

    MANIFEST_TSV = "manifest.tsv"
    MANIFEST_JSON = "manifest.json"
    METRICS_FILE = "metrics.csv"
    CONFIG_FILE = "config.cfg"
    CHECKPOINT_FILE = "checkpoint.tpck"
    LAST_GOOD_CHECKPOINT_FILE = "checkpoint_last_good.tpck"

    MANIFEST_COLUMNS = ["idx", "shape_class", "texture_class", "seed"]
    METRICS_COLUMNS = ["step", "epoch", "rgb", "depth", "dist", "norm", "total", "wall_ms"]

    CHECKPOINT_MAGIC = b"TPCK"
    CHECKPOINT_VERSION = 1

    @staticmethod
    def create_folder(path: str) -> str:
        if path and not os.path.exists(path):
            os.makedirs(path)
        return path

    @staticmethod
    def get_file_path_for_name(name: str, log_directory: str, file_ending: str = "txt", prefix: str = "",
                               add_date: bool = False) -> str:
        """
        Return the path for the file with the given name inside log_directory, which is created if needed
        :param name: The name of the file
        :param prefix: The prefix that should be attached to the file name
        :param add_date: Decides whether the current date should be appended to the file's name
        :return: path for the file
        """
        FileHelper.create_folder(log_directory)
        name_string = name
        if prefix != "":
            name_string = f"{prefix}_{name}"
        if add_date:
            name_string += f"_{datetime.now().date()}"
        name_string = FileHelper.clean_string(name_string)
        return os.path.join(log_directory, f"{name_string}.{file_ending}")

    @staticmethod
    def clean_string(string: str) -> str:
        return string.replace(":", "-").replace(" ", "_").replace(".", "_").replace("/", "_")

    @staticmethod
    def log_error(out_dir: str, file_name: str, name: str, error_message: str) -> str:
        path = FileHelper.get_file_path_for_name(name=file_name, log_directory=os.path.join(out_dir,
                                                                                            FileHelper.ERROR_FOLDER),
                                                 add_date=True)
        print(f"Log {file_name} to", path)
        with open(path, "a") as error_log:
            error_log.write(f"{datetime.now()}: {name}\n")
            error_log.write(f"\t\t {error_message}\n")
        return path

    # -- dataset files ------------------------------------------------------------------------------------------------

    @staticmethod
    def item_stem(idx: int) -> str:
        return f"{idx:05d}"

    @staticmethod
    def item_paths(root: str, idx: int) -> Tuple[str, str]:
        stem = os.path.join(root, FileHelper.TRAIN_FOLDER, FileHelper.item_stem(idx))
        return f"{stem}.png", f"{stem}.tpdm"

    @staticmethod
    def write_image(path: str, image: np.ndarray) -> None:
        """
        Writes an RGB float image in [0, 1] as 8-bit PNG
        """
        pixels = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        if pixels.ndim == 3:
            pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
        if not cv2.imwrite(path, pixels):
            raise OSError(f"could not write image {path}")

    @staticmethod
    def read_image(path: str) -> np.ndarray:
        """
        Reads a PNG as RGB float32 in [0, 1]
        """
        pixels = cv2.imread(path, cv2.IMREAD_COLOR)
        if pixels is None:
            raise DatasetError(f"{path}: missing or unreadable image")
        return cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0

    @staticmethod
    def write_depth_image(path: str, depth: np.ndarray, near: float, far: float) -> None:
        """
        Writes depth normalized from [near, far] to 8-bit gray
        """
        FileHelper.write_image(path, (np.asarray(depth) - near) / (far - near))

    @staticmethod
    def write_manifest(root: str, manifest: DatasetManifest) -> None:
        FileHelper.create_folder(root)
        with open(os.path.join(root, FileHelper.MANIFEST_TSV), "w", newline="") as manifest_file:
            writer = csv.writer(manifest_file, delimiter="\t", lineterminator="\n")
            writer.writerow(FileHelper.MANIFEST_COLUMNS)
            for row in manifest.rows:
                writer.writerow([row.idx, row.shape_class, row.texture_class, row.seed])
        summary = manifest.to_dict()
        summary.pop("rows", None)
        with open(os.path.join(root, FileHelper.MANIFEST_JSON), "w") as summary_file:
            summary_file.write(json.dumps(summary, indent=2, sort_keys=True))
            summary_file.write("\n")

    @staticmethod
    def read_manifest(root: str) -> DatasetManifest:
        tsv_path = os.path.join(root, FileHelper.MANIFEST_TSV)
        json_path = os.path.join(root, FileHelper.MANIFEST_JSON)
        if not os.path.exists(tsv_path):
            raise DatasetError(f"{tsv_path}: dataset manifest not found")
        rows: List[ManifestRow] = []
        with open(tsv_path, newline="") as manifest_file:
            reader = csv.reader(manifest_file, delimiter="\t")
            header = next(reader, None)
            if header != FileHelper.MANIFEST_COLUMNS:
                raise DatasetError(f"{tsv_path}: expected columns {FileHelper.MANIFEST_COLUMNS}, got {header}")
            for line_number, fields in enumerate(reader, start=2):
                try:
                    rows.append(ManifestRow(*(int(value) for value in fields)))
                except (TypeError, ValueError) as err:
                    raise DatasetError(f"{tsv_path}:{line_number}: malformed row {fields}") from err
        if os.path.exists(json_path):
            with open(json_path) as summary_file:
                summary = json.loads(summary_file.read())
            summary["rows"] = []
            manifest = DatasetManifest.from_dict(summary)
        else:
            manifest = DatasetManifest(count=len(rows), train_size=len(rows), val_size=0, seed=0, resolution=0,
                                       layout="", shape_classes=DatasetManifest.shape_vocabulary(),
                                       texture_classes=DatasetManifest.texture_vocabulary())
        manifest.rows = rows
        if manifest.count != len(rows):
            raise DatasetError(f"{tsv_path}: manifest lists {len(rows)} items, summary says {manifest.count}")
        return manifest

    # -- run outputs --------------------------------------------------------------------------------------------------

    @staticmethod
    def write_text(path: str, text: str) -> None:
        FileHelper.create_folder(os.path.dirname(path))
        with open(path, "w") as text_file:
            text_file.write(text)

    @staticmethod
    def write_json(path: str, data: dict) -> None:
        FileHelper.write_text(path, json.dumps(data, indent=2) + "\n")

    @staticmethod
    def start_metrics(path: str, keep_until_step: Optional[int] = None) -> None:
        """
        Creates the metrics CSV. When resuming, rows after keep_until_step are dropped
        """
        kept: List[List[str]] = []
        if keep_until_step is not None and os.path.exists(path):
            with open(path, newline="") as metrics_file:
                reader = csv.reader(metrics_file)
                next(reader, None)
                kept = [row for row in reader if row and int(row[0]) <= keep_until_step]
        with open(path, "w", newline="") as metrics_file:
            writer = csv.writer(metrics_file, lineterminator="\n")
            writer.writerow(FileHelper.METRICS_COLUMNS)
            writer.writerows(kept)

    @staticmethod
    def append_metrics(path: str, row: List) -> None:
        with open(path, "a", newline="") as metrics_file:
            csv.writer(metrics_file, lineterminator="\n").writerow(row)

    # -- checkpoints --------------------------------------------------------------------------------------------------

    @staticmethod
    def write_checkpoint(path: str, step: int, header: dict, tensors: Dict[str, np.ndarray]) -> None:
        """
        TPCK layout, little-endian: magic, u32 version, u32 step, u32 header length, header JSON,
        u32 tensor count, then per tensor u32 name length, name, u32 ndim, u32 dims, float32 data
        """
        FileHelper.create_folder(os.path.dirname(path))
        header_bytes = json.dumps(header, sort_keys=True).encode("utf8")
        chunks = [FileHelper.CHECKPOINT_MAGIC,
                  struct.pack("<III", FileHelper.CHECKPOINT_VERSION, step, len(header_bytes)),
                  header_bytes, struct.pack("<I", len(tensors))]
        for name, value in tensors.items():
            value = np.ascontiguousarray(value, dtype="<f4")
            name_bytes = name.encode("utf8")
            chunks.append(struct.pack("<I", len(name_bytes)))
            chunks.append(name_bytes)
            chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
            chunks.append(value.tobytes())
        temporary = f"{path}.tmp"
        with open(temporary, "wb") as checkpoint_file:
            checkpoint_file.write(b"".join(chunks))
        os.replace(temporary, path)

    @staticmethod
    def read_checkpoint(path: str) -> Tuple[int, dict, Dict[str, np.ndarray]]:
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path}: checkpoint not found")
        with open(path, "rb") as checkpoint_file:
            content = checkpoint_file.read()
        if content[:4] != FileHelper.CHECKPOINT_MAGIC:
            raise DatasetError(f"{path}: not a TPCK checkpoint")
        try:
            version, step, header_length = struct.unpack_from("<III", content, 4)
            if version != FileHelper.CHECKPOINT_VERSION:
                raise DatasetError(f"{path}: unsupported checkpoint version {version}")
            offset = 16
            header = json.loads(content[offset:offset + header_length].decode("utf8"))
            offset += header_length
            (count,) = struct.unpack_from("<I", content, offset)
            offset += 4
            tensors: Dict[str, np.ndarray] = OrderedDict()
            for _ in range(count):
                (name_length,) = struct.unpack_from("<I", content, offset)
                offset += 4
                name = content[offset:offset + name_length].decode("utf8")
                offset += name_length
                (ndim,) = struct.unpack_from("<I", content, offset)
                offset += 4
                shape = struct.unpack_from(f"<{ndim}I", content, offset)
                offset += 4 * ndim
                size = int(np.prod(shape)) if ndim else 1
                tensors[name] = np.frombuffer(content, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
                offset += 4 * size
        except (struct.error, ValueError) as err:
            raise DatasetError(f"{path}: truncated checkpoint") from err
        if offset != len(content):
            raise DatasetError(f"{path}: {len(content) - offset} trailing bytes after the last tensor")
        return step, header, tensors
