#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cmamba/rng.hpp"
#include "cmamba/tensor.hpp"

namespace cmamba {

// Rectangular numeric table; the timestamp column, when present, is parsed
// and discarded. Any missing or non-finite cell is a hard ingestion error.
struct TimeSeriesTable {
    std::vector<std::string> column_names;  // value columns only
    bool had_timestamp = false;
    std::size_t rows = 0;
    std::size_t channels = 0;
    std::vector<double> values;  // rows x channels, row-major

    double at(std::size_t r, std::size_t c) const { return values[r * channels + c]; }
};

TimeSeriesTable load_csv(const std::string& path, bool has_timestamp_col);

struct SplitSpec {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;

    void validate() const;
    // 6:2:2 for ETT-named datasets, 7:1:2 otherwise
    static SplitSpec for_dataset(const std::string& name);
};

struct ChannelStats {
    std::vector<double> mean, stddev;
};

// Z-scores every channel in place using statistics of the first `train_rows`
// rows (population stddev). Errors on zero-variance training channels.
ChannelStats normalize_global(TimeSeriesTable& table, std::size_t train_rows);

// Chronological row ranges. Core rows partition [0, rows); val/test views are
// extended `look_back` rows into the past so their first windows exist.
struct RowRange {
    std::size_t begin = 0;       // first row of the view (context included)
    std::size_t end = 0;         // one past the last row
    std::size_t core_begin = 0;  // first row owned by this split
    std::size_t length() const { return end - begin; }
};

struct SplitViews {
    RowRange train, val, test;
};

SplitViews make_splits(std::size_t rows, const SplitSpec& spec, std::size_t look_back);

struct WindowSample {
    Tensor x;  // (L,V)
    Tensor y;  // (T,V)
};

// Stride-1 sliding (look-back, horizon) windows over one row range.
class WindowSet {
public:
    WindowSet(const TimeSeriesTable& table, RowRange view, std::size_t look_back, std::size_t horizon);

    std::size_t count() const { return count_; }
    std::size_t look_back() const { return look_back_; }
    std::size_t horizon() const { return horizon_; }
    std::size_t channels() const { return table_->channels; }
    WindowSample sample(std::size_t i) const;

    // Gathers the given samples into (B,L,V) / (B,T,V) batch tensors.
    void gather(const std::vector<std::size_t>& indices, Tensor& x, Tensor& y) const;

private:
    const TimeSeriesTable* table_;
    RowRange view_;
    std::size_t look_back_;
    std::size_t horizon_;
    std::size_t count_;
};

// Deterministic batching. Training batchers reshuffle on begin_epoch() with
// the owned generator; evaluation batchers keep chronological order. The
// last partial batch is kept.
class Batcher {
public:
    Batcher(const WindowSet& windows, std::size_t batch_size, bool shuffle, std::uint64_t seed);

    std::size_t num_batches() const;
    void begin_epoch();
    // batch k as (B,L,V), (B,T,V)
    void get(std::size_t k, Tensor& x, Tensor& y) const;

private:
    const WindowSet* windows_;
    std::size_t batch_size_;
    bool shuffle_;
    Rng rng_;
    std::vector<std::size_t> order_;
};

}  // namespace cmamba
