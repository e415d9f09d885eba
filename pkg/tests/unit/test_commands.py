from unittest.mock import Mock, patch

import pytest

from jem_lab import commands
from jem_lab.checkpoint import Checkpoint, CheckpointStore
from jem_lab.errors import CheckpointError, TrainingFailedError
from jem_lab.trainer import JemTrainer

SMALL_CONFIG = """
seed = 1
data.generator = gauss_mixture
data.num_classes = 2
data.num_points = 20
model.hidden = 4
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG)
    return path


def test_interrupt_exits_cleanly(tmp_path):
    with patch("jem_lab.commands.load_checkpoint", side_effect=KeyboardInterrupt):
        assert commands.cmd_sample(tmp_path / "any.jemc", tmp_path) == 0


def test_library_errors_become_exit_code_one(tmp_path):
    with patch("jem_lab.commands.load_checkpoint", side_effect=CheckpointError("bad magic")):
        assert commands.cmd_eval(tmp_path / "any.jemc", tmp_path / "val.jtb", tmp_path) == 1


@patch.object(CheckpointStore, "save", autospec=True)
@patch.object(JemTrainer, "train", autospec=True)
def test_failed_training_saves_its_last_good_state(mock_train, mock_save, config_path, tmp_path):
    snapshot = Mock(name="snapshot")
    mock_train.side_effect = TrainingFailedError("ladder exhausted", checkpoint=snapshot)

    assert commands.cmd_train(config_path, tmp_path / "run") == 1

    mock_train.assert_called_once()
    mock_save.assert_called_once()
    assert mock_save.call_args.args[1] is snapshot


@patch.object(CheckpointStore, "save", autospec=True)
@patch.object(JemTrainer, "train", autospec=True)
def test_failed_training_without_state_saves_nothing(mock_train, mock_save, config_path, tmp_path):
    mock_train.side_effect = TrainingFailedError("diverged before the first epoch")
    assert commands.cmd_train(config_path, tmp_path / "run") == 1
    mock_save.assert_not_called()


def test_resume_refuses_a_checkpoint_from_another_dataset(config_path, tmp_path):
    out = tmp_path / "run"
    (out / "checkpoints").mkdir(parents=True)
    (out / "checkpoints" / "last.jemc").write_bytes(b"placeholder")
    foreign = Mock(spec=Checkpoint)
    foreign.spec_hash = "not-this-dataset"

    with patch("jem_lab.commands.load_checkpoint", return_value=foreign) as mock_load, \
            patch.object(JemTrainer, "train", autospec=True) as mock_train:
        assert commands.cmd_train(config_path, out, resume=True) == 1

    mock_load.assert_called_once()
    mock_train.assert_not_called()
