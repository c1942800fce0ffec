"""Python bindings for the tulip range-image upsampling toolkit."""

from ._core import (
    Model,
    RangeImage,
    SensorIntrinsics,
    TulipError,
    bilinear_upsample,
    chamfer,
    downsample_rows,
    evaluate_bilinear,
    evaluate_frame,
    generate_dataset,
    mae,
    nearest_upsample,
    pointcloud_to_range_image,
    range_image_to_pointcloud,
    read_ply,
    read_rimg,
    set_thread_count,
    thread_count,
    voxel_iou,
    write_ply,
    write_png,
    write_rimg,
)

__all__ = [name for name in dir() if not name.startswith("_")]
