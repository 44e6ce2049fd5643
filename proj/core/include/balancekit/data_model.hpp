#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace balancekit {

struct EngineConfig;
class MomentSpec;
struct ScalingRecord;

/// Ordered column names. Covariate j and outcome k keep their index
/// everywhere downstream (moment specs, reports, weight files).
struct Schema {
    std::vector<std::string> covariates;
    std::vector<std::string> outcomes;

    std::size_t covariate_index(const std::string& name) const;
    std::size_t outcome_index(const std::string& name) const;
    bool operator==(const Schema&) const = default;
};

struct UnitRecord {
    std::string unit_id;
    int treatment = 0;
    std::vector<double> covariates;
    std::vector<double> outcomes;
};

/// Column-major storage for one group inside a shard: d covariate columns
/// followed by m outcome columns, each `rows` long.
class ColumnBlock {
public:
    ColumnBlock() = default;
    ColumnBlock(std::size_t rows, std::size_t d, std::size_t m);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t dimension() const noexcept { return d_; }
    std::size_t outcome_count() const noexcept { return m_; }

    std::span<const double> covariate(std::size_t j) const;
    std::span<double> covariate(std::size_t j);
    std::span<const double> outcome(std::size_t k) const;
    std::span<double> outcome(std::size_t k);

    double at(std::size_t row, std::size_t j) const { return data_[j * rows_ + row]; }

    /// Raw column-major buffer (covariates then outcomes).
    std::span<const double> raw() const noexcept { return data_; }
    std::span<double> raw() noexcept { return data_; }

private:
    std::size_t rows_ = 0;
    std::size_t d_ = 0;
    std::size_t m_ = 0;
    std::vector<double> data_;
};

/// Independently scannable partition. Control and treated units are stored
/// in separate blocks; `treated_order` remembers the interleaving of the
/// source rows so CSV export can reproduce the input order.
struct Shard {
    std::vector<std::string> control_ids;
    std::vector<std::string> treated_ids;
    ColumnBlock control;
    ColumnBlock treated;
    std::vector<std::uint8_t> treated_order;

    std::size_t record_count() const noexcept { return control.rows() + treated.rows(); }
};

/// Immutable sharded table of units. Safe to read concurrently.
class Dataset {
public:
    Dataset() = default;
    Dataset(Schema schema, std::vector<Shard> shards);

    static Dataset from_records(Schema schema, const std::vector<UnitRecord>& records,
                                std::size_t shard_rows);

    const Schema& schema() const noexcept { return schema_; }
    std::size_t dimension() const noexcept { return schema_.covariates.size(); }
    std::size_t outcome_count() const noexcept { return schema_.outcomes.size(); }

    std::size_t shard_count() const noexcept { return shards_.size(); }
    const Shard& shard(std::size_t i) const { return *shards_[i]; }

    std::size_t n_control() const noexcept { return n_control_; }
    std::size_t n_treated() const noexcept { return n_treated_; }
    std::size_t size() const noexcept { return n_control_ + n_treated_; }

    /// Position of the shard's first control (treated) unit in the
    /// dataset-wide control (treated) ordering.
    std::size_t control_offset(std::size_t shard) const { return control_offsets_[shard]; }
    std::size_t treated_offset(std::size_t shard) const { return treated_offsets_[shard]; }

    /// Control unit ids in dataset-wide control order.
    std::vector<std::string> control_ids() const;

    /// Records in source order (shard by shard).
    std::vector<UnitRecord> records() const;

    /// Copy of the dataset restricted to the given rows (global control and
    /// treated indices, duplicates allowed). Duplicated units get an id
    /// suffix "#<draw>" so ids stay unique.
    Dataset gather(std::span<const std::size_t> control_rows,
                   std::span<const std::size_t> treated_rows,
                   std::size_t shard_rows) const;

    /// Same units, different shard boundaries.
    Dataset reshard(std::size_t shard_rows) const;

private:
    // Column transforms of a validated dataset keep its ids, so the
    // uniqueness scan is skipped.
    Dataset(Schema schema, std::vector<Shard> shards, bool check_ids);
    friend Dataset moment_features(const Dataset& ds, const MomentSpec& spec);
    friend std::pair<Dataset, ScalingRecord> standardize(const Dataset& ds, const EngineConfig& engine);

    Schema schema_;
    std::vector<std::shared_ptr<const Shard>> shards_;
    std::vector<std::size_t> control_offsets_;
    std::vector<std::size_t> treated_offsets_;
    std::size_t n_control_ = 0;
    std::size_t n_treated_ = 0;
};

inline constexpr std::size_t kDefaultShardRows = 65536;

// ---------------------------------------------------------------------------
// Ingestion and export

struct SchemaConfig {
    std::string id_column;
    std::string treatment_column;
    std::vector<std::string> covariate_columns;
    std::vector<std::string> outcome_columns;
    char delimiter = ',';
};

Dataset ingest_csv(const std::filesystem::path& path, const SchemaConfig& config,
                   std::size_t shard_rows = kDefaultShardRows);
Dataset ingest_csv(std::istream& in, const SchemaConfig& config,
                   std::size_t shard_rows = kDefaultShardRows);

/// Writes id, treatment, covariates, outcomes with shortest round-trip
/// float formatting, rows in source order.
void export_csv(const Dataset& ds, std::ostream& out, const SchemaConfig& config);

/// Shortest decimal string that parses back to exactly `value`.
std::string format_double(double value);

// Binary shard files ("BKSH").
inline constexpr std::uint16_t kShardFormatVersion = 1;

void write_shard(const Shard& shard, std::ostream& out);
Shard read_shard(std::istream& in);

/// Directory layout: schema.json plus shard-NNNNN.bksh files.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Moment functions

enum class MomentKind { first, second, cross };

struct Moment {
    MomentKind kind = MomentKind::first;
    std::size_t a = 0;
    std::size_t b = 0;  // cross moments only

    static Moment first(std::size_t j) { return {MomentKind::first, j, 0}; }
    static Moment second(std::size_t j) { return {MomentKind::second, j, 0}; }
    static Moment cross(std::size_t i, std::size_t j);

    std::string name(const Schema& schema) const;
    auto operator<=>(const Moment&) const = default;
};

class MomentSpec {
public:
    MomentSpec() = default;
    explicit MomentSpec(std::vector<Moment> moments);

    static MomentSpec first_moments(std::size_t d);
    static MomentSpec first_and_second(std::size_t d);

    std::size_t size() const noexcept { return moments_.size(); }
    const Moment& operator[](std::size_t j) const { return moments_[j]; }
    const std::vector<Moment>& moments() const noexcept { return moments_; }

    /// Throws ValidationError when empty, duplicated, or out of range for d.
    void validate(std::size_t d) const;
    std::vector<std::string> names(const Schema& schema) const;

    bool operator==(const MomentSpec&) const = default;

private:
    std::vector<Moment> moments_;
};

struct TargetMoments {
    std::vector<double> values;
    MomentSpec spec;
};

TargetMoments compute_target_moments(const Dataset& ds, const MomentSpec& spec);
TargetMoments compute_target_moments(const Dataset& ds, const MomentSpec& spec,
                                     const EngineConfig& engine);

/// New dataset whose covariate columns are the evaluated moment functions.
Dataset moment_features(const Dataset& ds, const MomentSpec& spec);

struct ScalingRecord {
    std::vector<double> means;
    std::vector<double> sds;
    std::vector<bool> zero_variance;
};

/// Pooled (both groups) centring and population-sd scaling of each covariate.
std::pair<Dataset, ScalingRecord> standardize(const Dataset& ds);
std::pair<Dataset, ScalingRecord> standardize(const Dataset& ds, const EngineConfig& engine);

}  // namespace balancekit
