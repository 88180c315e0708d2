"""
Tests for data loader utilities.
"""

import pytest
import pandas as pd
import sys
import os

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from utils.data_loader import (
    DataLoader, dataset_digest, event_to_record, parse_drive_line, read_dataset, summarize_drives,
    write_dataset,
)
from utils.errors import DatasetFormatError, UnknownEventTypeError
from utils.events import Vendor

HEADER = '{"format":"vehicle-drives","version":1}\n'


class TestDatasetFiles:
    """Test cases for reading and writing dataset files."""

    def test_write_then_read(self, fleet, tmp_path):
        """A written dataset reads back as the same drives."""
        path = tmp_path / "fleet.nd"
        assert write_dataset(fleet, path) == len(fleet)
        assert read_dataset(path) == list(fleet)

    def test_digest_is_stable(self, fleet):
        """The digest depends only on the drives."""
        assert dataset_digest(fleet) == dataset_digest(list(fleet))
        assert dataset_digest(fleet) != dataset_digest(fleet[1:])

    def test_bad_header(self, tmp_path):
        """Files without the dataset header are rejected at line 1."""
        path = tmp_path / "bad.nd"
        path.write_text('{"format":"other"}\n')
        with pytest.raises(DatasetFormatError) as info:
            read_dataset(path)
        assert info.value.line == 1

    def test_malformed_record(self, tmp_path):
        """A record missing required fields names its line."""
        path = tmp_path / "bad.nd"
        path.write_text(HEADER + '{"drive_id":"d1"}\n')
        with pytest.raises(DatasetFormatError) as info:
            read_dataset(path)
        assert info.value.line == 2

    def test_unknown_event_type(self, tmp_path):
        """Unknown event names raise UnknownEventTypeError with the line number."""
        path = tmp_path / "bad.nd"
        path.write_text(HEADER + '{"drive_id":"d1","vehicle_id":"v","label":"benign",'
                                 '"events":[{"type":"Teleport","t":1.0}]}\n')
        with pytest.raises(UnknownEventTypeError) as info:
            read_dataset(path)
        assert info.value.line == 2
        assert info.value.name == "Teleport"

    def test_missing_file(self, tmp_path):
        """Missing files raise FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "absent.nd")


class TestRecords:
    """Test cases for event and drive records."""

    def test_event_record_fields(self, make_drive):
        """Records carry the type name and only the attributes that are set."""
        drive = make_drive(["Car Entry 1", "Download Map", "Car Exit"])
        oem = next(e for e in drive.events if e.name == "OEM Communication")
        record = event_to_record(oem)
        assert record["type"] == "OEM Communication"
        assert set(record["attrs"]) == {"vendor"}
        assert record["attrs"]["vendor"]["known"] is True

    def test_parse_line_defaults(self):
        """Optional event fields default to zero."""
        drive = parse_drive_line('{"drive_id":"d1","vehicle_id":"v","label":"benign",'
                                 '"events":[{"type":"Unknown Vendor Communication","t":3.5,'
                                 '"attrs":{"vendor":{"name":"x","known":false}}}]}')
        event = drive.events[0]
        assert event.t == 3.5
        assert event.velocity == 0.0
        assert event.attrs.vendor == Vendor("x", False)


class TestDataLoader:
    """Test cases for DataLoader class."""

    def test_data_loader_initialization(self):
        """Test DataLoader initialization."""
        loader = DataLoader()
        assert loader.data_path is not None
        assert loader.data is None

    def test_summary(self, fleet, tmp_path):
        """Summary has one row per drive."""
        path = tmp_path / "fleet.nd"
        write_dataset(fleet, path)
        loader = DataLoader(path)
        summary = loader.summary()
        assert isinstance(summary, pd.DataFrame)
        assert len(summary) == len(fleet)
        assert list(summary.columns) == ["drive_id", "vehicle_id", "label", "n_events", "duration", "n_stories"]
        assert (summary["n_events"] > 0).all()

    def test_summarize_empty(self):
        """No drives give an empty table with the same columns."""
        assert summarize_drives([]).empty


if __name__ == "__main__":
    pytest.main([__file__])
