"""Retrieval-as-classifier pipeline for chest X-ray pneumothorax screening.

Feature extraction (whole image / chest halves), optional 256-dim encoder
compression, exact Euclidean k-NN with majority voting, and ROC/Youden
cross-validated evaluation.
"""

from .datamodel import (DatasetManifest, DatasetMode, FeatureConfig, FeatureMatrix,
                        FeatureVector, ImageRecord, Source, assemble_manifest,
                        assign_folds, load_manifest, read_store, read_store_arrays,
                        save_manifest, write_store, write_store_arrays)
from .encoder import (Encoder, EncoderPipelineConfig, PcaModel, build_autoencoder,
                      pca_fit, pca_project, strip_to_encoder, train_encoder_pipeline,
                      train_step1_unsupervised, train_step2_finetune)
from .evaluation import (ExperimentReport, RocCurve, compare_reducers, confusion, roc,
                         run_cv, youden)
from .imaging import (BaselinePoolExtractor, ExternalStoreExtractor, ExtractorSpec,
                      GrayImage, baseline_extract, extract_config, load_image, resize,
                      split_and_flip)
from .neuralnet import (Activation, AdamState, DenseLayer, Network, adam_step, backward,
                        build_network, forward, load_network, loss, save_network, train)
from .search import NeighborSet, SearchIndex, build_index, classify, knn, knn_batch, vote

__version__ = "0.1.0"
