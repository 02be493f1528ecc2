"""Universal per-target image perturbations via multi-crop feature alignment
with a Reptile meta-learned initialization."""

__version__ = "0.1.0"
