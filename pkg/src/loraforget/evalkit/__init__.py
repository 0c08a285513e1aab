from .metrics import (cls_metrics, dice_iou, dice_iou_per_item, divergence, divergence_arrays, predict,
                      split_metric)
