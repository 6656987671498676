"""Tests for logging setup and per-fold log routing."""

import logging

from rsm_codg.logging_config import fold_logging, setup_logging


def test_file_handler_receives_package_records(tmp_path):
    log_file = tmp_path / "logs" / "run.log"
    setup_logging(level="debug", log_file=str(log_file))
    logging.getLogger("rsm_codg.trainer").debug("fold 0 epoch 1")
    for handler in logging.getLogger("rsm_codg").handlers:
        handler.flush()
    assert "rsm_codg.trainer - DEBUG - fold 0 epoch 1" in log_file.read_text(encoding="utf-8")


def test_unknown_level_falls_back_to_info():
    setup_logging(level="chatty")
    assert logging.getLogger("rsm_codg").level == logging.INFO


class TestFoldLogging:
    def test_records_are_tagged_and_confined_to_the_block(self, tmp_path):
        path = tmp_path / "fold_4" / "fold.log"
        trainer = logging.getLogger("rsm_codg.trainer")
        with fold_logging(path, 4):
            trainer.info("epoch 0 done")
        trainer.info("after the fold")
        text = path.read_text(encoding="utf-8")
        assert "fold 4 - rsm_codg.trainer - INFO - epoch 0 done" in text
        assert "after the fold" not in text

    def test_unset_package_level_is_raised_then_restored(self, tmp_path):
        package = logging.getLogger("rsm_codg")
        package.setLevel(logging.NOTSET)
        with fold_logging(tmp_path / "fold.log", 0, level="debug") as handler:
            assert package.level == logging.DEBUG
            assert handler in package.handlers
        assert package.level == logging.NOTSET
        assert handler not in package.handlers

    def test_configured_level_is_kept(self, tmp_path):
        setup_logging(level="WARNING")
        path = tmp_path / "fold.log"
        with fold_logging(path, 1):
            logging.getLogger("rsm_codg.network").info("quiet")
            logging.getLogger("rsm_codg.network").warning("loud")
        assert logging.getLogger("rsm_codg").level == logging.WARNING
        text = path.read_text(encoding="utf-8")
        assert "quiet" not in text and "loud" in text

    def test_separate_folds_write_separate_files(self, tmp_path):
        for fold in (0, 1):
            with fold_logging(tmp_path / f"fold_{fold}.log", fold):
                logging.getLogger("rsm_codg").info(f"training fold {fold}")
        assert "training fold 1" not in (tmp_path / "fold_0.log").read_text(encoding="utf-8")
        assert "fold 1 - rsm_codg - INFO" in (tmp_path / "fold_1.log").read_text(encoding="utf-8")
