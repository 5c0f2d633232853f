"""Multi-modal ECG beat classification pipeline.

Raw WFDB records go in; per-beat raster images fused with patient
demographics come out the other end of a small convolutional network
trained from scratch. Subpackages follow the pipeline order:

- ``wfdb``: header / format-212 signal / annotation parsing
- ``prep``: segmentation, smoothing, baseline correction, rasterization
- ``dataset``: class schemes, patient vectors, stratified splits
- ``autodiff`` / ``nn``: tensor core and the fusion network
- ``training``: loss, scheduler, optimizer, train / k-fold / transfer
- ``metrics``: confusion matrices and per-class reports
- ``cli``: command-line orchestration
"""

__version__ = "0.1.0"
