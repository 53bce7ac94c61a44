#include "cmamba/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace cmamba {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_line(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            cells.push_back(trim(line.substr(start, i - start)));
            start = i + 1;
        }
    }
    return cells;
}

}  // namespace

TimeSeriesTable load_csv(const std::string& path, bool has_timestamp_col) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open csv file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty csv file: " + path);

    TimeSeriesTable table;
    table.had_timestamp = has_timestamp_col;
    auto header = split_line(line);
    const std::size_t skip = has_timestamp_col ? 1 : 0;
    if (header.size() <= skip) throw std::runtime_error("csv file has no value columns: " + path);
    for (std::size_t i = skip; i < header.size(); ++i) table.column_names.emplace_back(header[i]);
    table.channels = table.column_names.size();
    const std::size_t expected_cells = header.size();

    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;  // ignore trailing blank lines
        auto cells = split_line(line);
        if (cells.size() != expected_cells) {
            throw std::runtime_error("csv row " + std::to_string(row + 1) + " has " +
                                     std::to_string(cells.size()) + " cells, expected " +
                                     std::to_string(expected_cells));
        }
        for (std::size_t c = skip; c < cells.size(); ++c) {
            const auto cell = cells[c];
            double value = 0.0;
            const char* first = cell.data();
            const char* last = cell.data() + cell.size();
            auto [ptr, ec] = std::from_chars(first, last, value);
            if (ec != std::errc{} || ptr != last || cell.empty()) {
                throw std::runtime_error("csv parse error at row " + std::to_string(row + 1) + ", column " +
                                         std::to_string(c) + ": '" + std::string(cell) + "' is not numeric");
            }
            if (!std::isfinite(value)) {
                throw std::runtime_error("csv missing/non-finite value at row " + std::to_string(row + 1) +
                                         ", column " + std::to_string(c));
            }
            table.values.push_back(value);
        }
        ++row;
    }
    table.rows = row;
    if (table.rows == 0) throw std::runtime_error("csv file has a header but no data rows: " + path);
    return table;
}

void SplitSpec::validate() const {
    if (train < 0 || val < 0 || test < 0 || std::fabs(train + val + test - 1.0) > 1e-9) {
        throw std::invalid_argument("split ratios must be non-negative and sum to 1");
    }
}

SplitSpec SplitSpec::for_dataset(const std::string& name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower.rfind("ett", 0) == 0) return SplitSpec{0.6, 0.2, 0.2};
    return SplitSpec{0.7, 0.1, 0.2};
}

ChannelStats normalize_global(TimeSeriesTable& table, std::size_t train_rows) {
    if (train_rows == 0 || train_rows > table.rows) {
        throw std::invalid_argument("normalize: train split must be non-empty and within the table");
    }
    ChannelStats stats;
    stats.mean.resize(table.channels);
    stats.stddev.resize(table.channels);
    for (std::size_t c = 0; c < table.channels; ++c) {
        double sum = 0.0;
        for (std::size_t r = 0; r < train_rows; ++r) sum += table.at(r, c);
        const double mean = sum / static_cast<double>(train_rows);
        double sq = 0.0;
        for (std::size_t r = 0; r < train_rows; ++r) {
            const double d = table.at(r, c) - mean;
            sq += d * d;
        }
        const double var = sq / static_cast<double>(train_rows);
        if (var <= 0.0) {
            const std::string name = c < table.column_names.size() ? table.column_names[c] : std::to_string(c);
            throw std::runtime_error("normalize: channel '" + name + "' has zero variance on the train split");
        }
        stats.mean[c] = mean;
        stats.stddev[c] = std::sqrt(var);
    }
    for (std::size_t r = 0; r < table.rows; ++r) {
        for (std::size_t c = 0; c < table.channels; ++c) {
            table.values[r * table.channels + c] = (table.at(r, c) - stats.mean[c]) / stats.stddev[c];
        }
    }
    return stats;
}

SplitViews make_splits(std::size_t rows, const SplitSpec& spec, std::size_t look_back) {
    spec.validate();
    const auto n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(rows)));
    const auto n_val = static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(rows)));
    // flooring remainder goes to the test split
    SplitViews views;
    views.train = RowRange{0, n_train, 0};
    const std::size_t val_core = n_train;
    const std::size_t test_core = n_train + n_val;
    views.val = RowRange{val_core > look_back ? val_core - look_back : 0, test_core, val_core};
    views.test = RowRange{test_core > look_back ? test_core - look_back : 0, rows, test_core};
    return views;
}

WindowSet::WindowSet(const TimeSeriesTable& table, RowRange view, std::size_t look_back, std::size_t horizon)
    : table_(&table), view_(view), look_back_(look_back), horizon_(horizon) {
    if (view.end > table.rows || view.begin > view.end) {
        throw std::invalid_argument("window set: view out of range");
    }
    const std::size_t len = view.length();
    if (len < look_back + horizon) {
        throw std::invalid_argument("window set: view of " + std::to_string(len) +
                                    " rows is too short for look-back " + std::to_string(look_back) +
                                    " + horizon " + std::to_string(horizon));
    }
    count_ = len - look_back - horizon + 1;
}

WindowSample WindowSet::sample(std::size_t i) const {
    if (i >= count_) throw std::out_of_range("window index out of range");
    const std::size_t v = table_->channels;
    const std::size_t x_start = view_.begin + i;
    WindowSample s;
    s.x = Tensor({look_back_, v},
                 std::vector<double>(table_->values.begin() + static_cast<std::ptrdiff_t>(x_start * v),
                                     table_->values.begin() + static_cast<std::ptrdiff_t>((x_start + look_back_) * v)));
    const std::size_t y_start = x_start + look_back_;
    s.y = Tensor({horizon_, v},
                 std::vector<double>(table_->values.begin() + static_cast<std::ptrdiff_t>(y_start * v),
                                     table_->values.begin() + static_cast<std::ptrdiff_t>((y_start + horizon_) * v)));
    return s;
}

void WindowSet::gather(const std::vector<std::size_t>& indices, Tensor& x, Tensor& y) const {
    const std::size_t b = indices.size();
    const std::size_t v = table_->channels;
    x = Tensor({b, look_back_, v});
    y = Tensor({b, horizon_, v});
    for (std::size_t k = 0; k < b; ++k) {
        const std::size_t i = indices[k];
        if (i >= count_) throw std::out_of_range("window index out of range");
        const std::size_t x_start = view_.begin + i;
        const double* src_x = table_->values.data() + x_start * v;
        std::copy(src_x, src_x + look_back_ * v, x.values().data() + k * look_back_ * v);
        const double* src_y = table_->values.data() + (x_start + look_back_) * v;
        std::copy(src_y, src_y + horizon_ * v, y.values().data() + k * horizon_ * v);
    }
}

Batcher::Batcher(const WindowSet& windows, std::size_t batch_size, bool shuffle, std::uint64_t seed)
    : windows_(&windows), batch_size_(batch_size), shuffle_(shuffle), rng_(seed, /*stream=*/11) {
    if (batch_size_ == 0) throw std::invalid_argument("batch size must be >= 1");
    order_.resize(windows.count());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
}

std::size_t Batcher::num_batches() const {
    return (order_.size() + batch_size_ - 1) / batch_size_;
}

void Batcher::begin_epoch() {
    if (!shuffle_) return;
    const auto perm = rng_.permutation(order_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = perm[i];
}

void Batcher::get(std::size_t k, Tensor& x, Tensor& y) const {
    const std::size_t lo = k * batch_size_;
    const std::size_t hi = std::min(lo + batch_size_, order_.size());
    if (lo >= hi) throw std::out_of_range("batch index out of range");
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(lo),
                                 order_.begin() + static_cast<std::ptrdiff_t>(hi));
    windows_->gather(idx, x, y);
}

}  // namespace cmamba
