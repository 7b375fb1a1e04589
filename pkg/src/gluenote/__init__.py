"""Symbolic note alignment with a transformer similarity model and DTW-based match extraction."""
from .errors import (CheckpointError, DanglingNoteWarning, DecodeError, EmptySequenceError,
                     GlueNoteError, MidiParseError, TrainingDivergence, ValidationError)
from .midi_io import (DEFAULT, AlignmentPair, Note, NoteSequence, load_alignment, load_midi,
                      save_alignment, write_midi)
from .tokenizer import TokenBlockSequence, TokenVocabulary, detokenize, prepend_default, tokenize
from .augmentor import AugmentationConfig, AugmentedPair, make_eval_mismatch_pair, make_training_pair
from .evaluator import MatchScore, evaluate_corpus, match_prf, pitch_onset_similarity
from .extractors import MatchPrediction, dtw_extract, greedy_extract, head_extract, weighted_dtw

__version__ = "0.1.0"
