from datetime import date

import numpy as np
import pytest

from evtpool.utils.errors import (
    DegenerateCovariateError,
    InsufficientDataError,
    MissingInputError,
    ParseError,
    ValidationError,
)
from evtpool.utils.swim_loader import (
    SuitEpochs,
    build_event_dataset,
    date_from_decimal_year,
    decimal_year,
    fit_time_scaler,
    ingest_csv,
    standardize_datasets,
    suit_indicator,
)

from conftest import swims

HEADER = 'swimmer_id,event_id,time_s,date\n'


def write(tmp_path, body, header=HEADER):
    path = tmp_path / 'results.csv'
    path.write_text(header + body, encoding='utf-8')
    return path


class TestIngest:
    def test_keeps_fastest_swim(self, tmp_path):
        path = write(tmp_path, 'a,100_free_M,48.10,2015-03-01\n'
                               'a,100_free_M,47.90,2016-03-01\n'
                               'b,100_free_M,48.00,2015-05-01\n')
        records = ingest_csv(path)
        assert [(r.swimmer_id, r.time_s) for r in records] == [('a', 47.90), ('b', 48.00)]
        assert records[0].x == pytest.approx(-47.90)

    def test_tie_keeps_earliest_date(self, tmp_path):
        path = write(tmp_path, 'a,100_free_M,48.00,2016-03-01\na,100_free_M,48.00,2014-03-01\n')
        assert ingest_csv(path)[0].date == date(2014, 3, 1)

    def test_nation_column(self, tmp_path):
        path = write(tmp_path, 'a,100_free_M,48.00,2016-03-01,GBR\n', header='swimmer_id,event_id,time_s,date,nation\n')
        assert ingest_csv(path)[0].nation == 'GBR'

    def test_bad_header(self, tmp_path):
        path = write(tmp_path, 'a,100_free_M,48.00,2016-03-01\n', header='id,event,time,date\n')
        with pytest.raises(ParseError) as err:
            ingest_csv(path)
        assert err.value.line == 1

    def test_too_many_decimals(self, tmp_path):
        path = write(tmp_path, 'a,100_free_M,48.00,2016-03-01\nb,100_free_M,48.123,2016-03-01\n')
        with pytest.raises(ParseError) as err:
            ingest_csv(path)
        assert err.value.line == 3

    def test_bad_date(self, tmp_path):
        path = write(tmp_path, 'a,100_free_M,48.00,2016-13-01\n')
        with pytest.raises(ParseError):
            ingest_csv(path)

    def test_unknown_event(self, tmp_path):
        path = write(tmp_path, 'a,100_crawl_M,48.00,2016-03-01\n')
        with pytest.raises(ValidationError):
            ingest_csv(path, event_ids=['100_free_M'])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError) as err:
            ingest_csv(tmp_path / 'nope.csv')
        assert err.value.exit_code == 2
        assert 'nope.csv' in err.value.message


class TestThreshold:
    def test_threshold_is_censor_adjusted(self):
        records = swims('100_free_M', [47.0, 47.5, 47.8, 48.0, 48.2])
        d = build_event_dataset(records, '100_free_M', n_exceed=4, s=0.01)
        assert d.raw_threshold_u_prime == pytest.approx(-48.0)
        assert d.threshold_u == pytest.approx(-48.005)
        assert d.u_L == pytest.approx(np.log(48.005))
        assert len(d) == 4
        assert d.x[d.record_index] == pytest.approx(-47.0)

    def test_not_enough_swims(self):
        with pytest.raises(InsufficientDataError):
            build_event_dataset(swims('100_free_M', [47.0, 47.5]), '100_free_M', n_exceed=3)


class TestTime:
    def test_decimal_year(self):
        assert decimal_year(date(2008, 1, 1)) == 2008.0
        assert decimal_year(date(2008, 7, 2)) == pytest.approx(2008 + 183 / 366)
        assert date_from_decimal_year(decimal_year(date(2013, 9, 17))) == date(2013, 9, 17)

    def test_scaler_uses_population_sd(self):
        d = build_event_dataset(swims('100_free_M', [47.0, 47.5, 47.8, 48.0], step_days=400),
                                '100_free_M', n_exceed=4)
        scaler = fit_time_scaler([d])
        assert scaler.mean == pytest.approx(np.mean(d.decimal_years))
        assert scaler.sd == pytest.approx(np.std(d.decimal_years, ddof=0))
        assert scaler.year_boundaries[0] == 2005.0
        assert scaler.year_boundaries[-1] == np.floor(d.decimal_years.max()) + 1

    def test_standardized_times_have_unit_spread(self):
        d = build_event_dataset(swims('100_free_M', [47.0, 47.5, 47.8, 48.0], step_days=400),
                                '100_free_M', n_exceed=4)
        (std,), scalers = standardize_datasets([d])
        assert np.mean(std.t_std) == pytest.approx(0.0, abs=1e-12)
        assert np.std(std.t_std) == pytest.approx(1.0)
        assert std.window == scalers['100_free_M'].window_std

    def test_degenerate_dates(self):
        d = build_event_dataset(swims('100_free_M', [47.0, 47.5], step_days=0), '100_free_M', n_exceed=2)
        with pytest.raises(DegenerateCovariateError):
            fit_time_scaler([d])

    def test_suit_indicator(self):
        epochs = SuitEpochs()
        assert suit_indicator(date(2008, 8, 10), epochs) == (True, False)
        assert suit_indicator(date(2009, 7, 26), epochs) == (False, True)
        assert suit_indicator(date(2010, 1, 1), epochs) == (False, False)
