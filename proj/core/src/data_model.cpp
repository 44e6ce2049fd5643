#include "balancekit/data_model.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "balancekit/engine.hpp"
#include "balancekit/errors.hpp"

namespace balancekit {

std::size_t Schema::covariate_index(const std::string& name) const {
    auto it = std::find(covariates.begin(), covariates.end(), name);
    if (it == covariates.end()) throw ValidationError("unknown covariate '" + name + "'");
    return static_cast<std::size_t>(it - covariates.begin());
}

std::size_t Schema::outcome_index(const std::string& name) const {
    auto it = std::find(outcomes.begin(), outcomes.end(), name);
    if (it == outcomes.end()) throw ValidationError("unknown outcome '" + name + "'");
    return static_cast<std::size_t>(it - outcomes.begin());
}

ColumnBlock::ColumnBlock(std::size_t rows, std::size_t d, std::size_t m)
    : rows_(rows), d_(d), m_(m), data_(rows * (d + m), 0.0) {}

std::span<const double> ColumnBlock::covariate(std::size_t j) const {
    return {data_.data() + j * rows_, rows_};
}
std::span<double> ColumnBlock::covariate(std::size_t j) {
    return {data_.data() + j * rows_, rows_};
}
std::span<const double> ColumnBlock::outcome(std::size_t k) const {
    return {data_.data() + (d_ + k) * rows_, rows_};
}
std::span<double> ColumnBlock::outcome(std::size_t k) {
    return {data_.data() + (d_ + k) * rows_, rows_};
}

// ---------------------------------------------------------------------------

Dataset::Dataset(Schema schema, std::vector<Shard> shards) : Dataset(std::move(schema), std::move(shards), true) {}

Dataset::Dataset(Schema schema, std::vector<Shard> shards, bool check_ids) : schema_(std::move(schema)) {
    const std::size_t d = schema_.covariates.size();
    const std::size_t m = schema_.outcomes.size();
    std::unordered_set<std::string> seen;
    for (std::size_t s = 0; s < shards.size(); ++s) {
        Shard& sh = shards[s];
        for (const ColumnBlock* b : {&sh.control, &sh.treated}) {
            if (b->rows() > 0 && (b->dimension() != d || b->outcome_count() != m)) {
                throw ValidationError("shard " + std::to_string(s) +
                                      " does not match the schema dimensions");
            }
        }
        if (sh.control.rows() == 0) sh.control = ColumnBlock(0, d, m);
        if (sh.treated.rows() == 0) sh.treated = ColumnBlock(0, d, m);
        if (sh.control_ids.size() != sh.control.rows() || sh.treated_ids.size() != sh.treated.rows()) {
            throw ValidationError("shard " + std::to_string(s) + " id count mismatch");
        }
        if (sh.treated_order.empty()) {
            sh.treated_order.assign(sh.control.rows(), 0);
            sh.treated_order.resize(sh.record_count(), 1);
        }
        if (check_ids) {
            for (const auto* ids : {&sh.control_ids, &sh.treated_ids}) {
                for (const auto& id : *ids) {
                    if (!seen.insert(id).second) throw IngestError("duplicate unit_id '" + id + "'");
                }
            }
        }
        control_offsets_.push_back(n_control_);
        treated_offsets_.push_back(n_treated_);
        n_control_ += sh.control.rows();
        n_treated_ += sh.treated.rows();
        shards_.push_back(std::make_shared<const Shard>(std::move(sh)));
    }
    if (n_control_ == 0) throw ValidationError("dataset has no control units");
    if (n_treated_ == 0) throw ValidationError("dataset has no treated units");
}

namespace {

Shard build_shard(const std::vector<const UnitRecord*>& recs, std::size_t d, std::size_t m) {
    std::size_t nt = 0;
    for (const auto* r : recs) nt += r->treatment == 1;
    const std::size_t nc = recs.size() - nt;
    Shard sh;
    sh.control = ColumnBlock(nc, d, m);
    sh.treated = ColumnBlock(nt, d, m);
    sh.control_ids.reserve(nc);
    sh.treated_ids.reserve(nt);
    sh.treated_order.reserve(recs.size());
    std::size_t ic = 0, it = 0;
    for (const auto* r : recs) {
        const bool t = r->treatment == 1;
        ColumnBlock& b = t ? sh.treated : sh.control;
        std::size_t& row = t ? it : ic;
        for (std::size_t j = 0; j < d; ++j) b.covariate(j)[row] = r->covariates[j];
        for (std::size_t k = 0; k < m; ++k) b.outcome(k)[row] = r->outcomes[k];
        (t ? sh.treated_ids : sh.control_ids).push_back(r->unit_id);
        sh.treated_order.push_back(t ? 1 : 0);
        ++row;
    }
    return sh;
}

}  // namespace

Dataset Dataset::from_records(Schema schema, const std::vector<UnitRecord>& records,
                              std::size_t shard_rows) {
    if (shard_rows == 0) throw ValidationError("shard_rows must be positive");
    const std::size_t d = schema.covariates.size();
    const std::size_t m = schema.outcomes.size();
    std::vector<Shard> shards;
    std::vector<const UnitRecord*> chunk;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const UnitRecord& r = records[i];
        if (r.treatment != 0 && r.treatment != 1)
            throw ValidationError("record " + std::to_string(i) + ": treatment must be 0 or 1");
        if (r.covariates.size() != d || r.outcomes.size() != m)
            throw ValidationError("record " + std::to_string(i) + ": wrong number of values");
        for (double v : r.covariates)
            if (!std::isfinite(v)) throw ValidationError("record " + std::to_string(i) + ": non-finite value");
        for (double v : r.outcomes)
            if (!std::isfinite(v)) throw ValidationError("record " + std::to_string(i) + ": non-finite value");
        chunk.push_back(&r);
        if (chunk.size() == shard_rows) {
            shards.push_back(build_shard(chunk, d, m));
            chunk.clear();
        }
    }
    if (!chunk.empty()) shards.push_back(build_shard(chunk, d, m));
    return Dataset(std::move(schema), std::move(shards));
}

std::vector<std::string> Dataset::control_ids() const {
    std::vector<std::string> out;
    out.reserve(n_control_);
    for (const auto& sh : shards_) out.insert(out.end(), sh->control_ids.begin(), sh->control_ids.end());
    return out;
}

std::vector<UnitRecord> Dataset::records() const {
    const std::size_t d = dimension(), m = outcome_count();
    std::vector<UnitRecord> out;
    out.reserve(size());
    for (const auto& sh : shards_) {
        std::size_t ic = 0, it = 0;
        for (std::uint8_t t : sh->treated_order) {
            const ColumnBlock& b = t ? sh->treated : sh->control;
            std::size_t row = t ? it++ : ic++;
            UnitRecord r;
            r.unit_id = t ? sh->treated_ids[row] : sh->control_ids[row];
            r.treatment = t;
            r.covariates.resize(d);
            r.outcomes.resize(m);
            for (std::size_t j = 0; j < d; ++j) r.covariates[j] = b.covariate(j)[row];
            for (std::size_t k = 0; k < m; ++k) r.outcomes[k] = b.outcome(k)[row];
            out.push_back(std::move(r));
        }
    }
    return out;
}

namespace {

struct RowRef {
    const Shard* shard;
    std::size_t row;
};

std::vector<RowRef> row_refs(const Dataset& ds, bool treated) {
    std::vector<RowRef> refs;
    refs.reserve(treated ? ds.n_treated() : ds.n_control());
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        const Shard& sh = ds.shard(s);
        const std::size_t n = treated ? sh.treated.rows() : sh.control.rows();
        for (std::size_t i = 0; i < n; ++i) refs.push_back({&sh, i});
    }
    return refs;
}

}  // namespace

Dataset Dataset::gather(std::span<const std::size_t> control_rows,
                        std::span<const std::size_t> treated_rows, std::size_t shard_rows) const {
    const auto cref = row_refs(*this, false);
    const auto tref = row_refs(*this, true);
    const std::size_t d = dimension(), m = outcome_count();
    std::vector<UnitRecord> recs;
    recs.reserve(control_rows.size() + treated_rows.size());
    auto emit = [&](const RowRef& ref, bool treated, std::size_t draw) {
        const ColumnBlock& b = treated ? ref.shard->treated : ref.shard->control;
        UnitRecord r;
        r.unit_id = (treated ? ref.shard->treated_ids : ref.shard->control_ids)[ref.row] + "#" +
                    std::to_string(draw);
        r.treatment = treated ? 1 : 0;
        r.covariates.resize(d);
        r.outcomes.resize(m);
        for (std::size_t j = 0; j < d; ++j) r.covariates[j] = b.covariate(j)[ref.row];
        for (std::size_t k = 0; k < m; ++k) r.outcomes[k] = b.outcome(k)[ref.row];
        recs.push_back(std::move(r));
    };
    for (std::size_t i = 0; i < control_rows.size(); ++i) {
        if (control_rows[i] >= cref.size()) throw ValidationError("control row out of range");
        emit(cref[control_rows[i]], false, i);
    }
    for (std::size_t i = 0; i < treated_rows.size(); ++i) {
        if (treated_rows[i] >= tref.size()) throw ValidationError("treated row out of range");
        emit(tref[treated_rows[i]], true, i);
    }
    return from_records(schema_, recs, shard_rows);
}

Dataset Dataset::reshard(std::size_t shard_rows) const {
    return from_records(schema_, records(), shard_rows);
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string_view> split(std::string_view line, char delim) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(delim, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

bool parse_double(std::string_view s, double& out) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

std::size_t find_column(const std::vector<std::string>& header, const std::string& name,
                        const char* role) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
        throw IngestError(std::string(role) + " column '" + name + "' not found in header");
    return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

Dataset ingest_csv(const std::filesystem::path& path, const SchemaConfig& config,
                   std::size_t shard_rows) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open data file '" + path.string() + "'");
    return ingest_csv(in, config, shard_rows);
}

Dataset ingest_csv(std::istream& in, const SchemaConfig& config, std::size_t shard_rows) {
    if (shard_rows == 0) throw ValidationError("shard_rows must be positive");
    if (config.id_column.empty()) throw ValidationError("no id column configured");
    if (config.treatment_column.empty()) throw ValidationError("no treatment column configured");
    if (config.covariate_columns.empty()) throw ValidationError("at least one covariate column is required");
    {
        std::set<std::string> roles;
        auto claim = [&](const std::string& c) {
            if (!roles.insert(c).second) throw ValidationError("column '" + c + "' assigned more than one role");
        };
        claim(config.id_column);
        claim(config.treatment_column);
        for (const auto& c : config.covariate_columns) claim(c);
        for (const auto& c : config.outcome_columns) claim(c);
    }

    std::string line;
    if (!std::getline(in, line)) throw IngestError("empty input: header row required");
    std::vector<std::string> header;
    for (auto f : split(line, config.delimiter)) header.emplace_back(trim(f));

    const std::size_t id_col = find_column(header, config.id_column, "id");
    const std::size_t t_col = find_column(header, config.treatment_column, "treatment");
    std::vector<std::size_t> x_cols, y_cols;
    for (const auto& c : config.covariate_columns) x_cols.push_back(find_column(header, c, "covariate"));
    for (const auto& c : config.outcome_columns) y_cols.push_back(find_column(header, c, "outcome"));

    std::vector<UnitRecord> recs;
    std::unordered_set<std::string> ids;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto fields = split(line, config.delimiter);
        auto fail = [&](const std::string& msg) {
            throw IngestError("row " + std::to_string(line_no) + ": " + msg);
        };
        if (fields.size() != header.size())
            fail("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
        UnitRecord r;
        r.unit_id = std::string(trim(fields[id_col]));
        if (r.unit_id.empty()) fail("empty unit id");
        if (!ids.insert(r.unit_id).second) fail("duplicate unit_id '" + r.unit_id + "'");
        auto t = trim(fields[t_col]);
        if (t == "0") r.treatment = 0;
        else if (t == "1") r.treatment = 1;
        else fail("treatment value '" + std::string(t) + "' is not 0 or 1");
        r.covariates.resize(x_cols.size());
        for (std::size_t j = 0; j < x_cols.size(); ++j) {
            if (!parse_double(fields[x_cols[j]], r.covariates[j]))
                fail("cannot parse '" + std::string(fields[x_cols[j]]) + "' in column '" +
                     config.covariate_columns[j] + "'");
        }
        r.outcomes.resize(y_cols.size());
        for (std::size_t k = 0; k < y_cols.size(); ++k) {
            if (!parse_double(fields[y_cols[k]], r.outcomes[k]))
                fail("cannot parse '" + std::string(fields[y_cols[k]]) + "' in column '" +
                     config.outcome_columns[k] + "'");
        }
        recs.push_back(std::move(r));
    }
    Schema schema{config.covariate_columns, config.outcome_columns};
    return Dataset::from_records(std::move(schema), recs, shard_rows);
}

std::string format_double(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    (void)ec;
    return std::string(buf, ptr);
}

void export_csv(const Dataset& ds, std::ostream& out, const SchemaConfig& config) {
    const char dl = config.delimiter;
    out << config.id_column << dl << config.treatment_column;
    for (const auto& c : ds.schema().covariates) out << dl << c;
    for (const auto& c : ds.schema().outcomes) out << dl << c;
    out << '\n';
    for (const auto& r : ds.records()) {
        out << r.unit_id << dl << r.treatment;
        for (double v : r.covariates) out << dl << format_double(v);
        for (double v : r.outcomes) out << dl << format_double(v);
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Binary shards

namespace {

template <class T>
void put_le(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
    unsigned char b[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw IngestError("truncated shard file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

void put_block(std::ostream& out, const ColumnBlock& b) {
    if constexpr (std::endian::native == std::endian::little) {
        auto raw = b.raw();
        out.write(reinterpret_cast<const char*>(raw.data()),
                  static_cast<std::streamsize>(raw.size() * sizeof(double)));
    } else {
        for (double v : b.raw()) put_le(out, v);
    }
}

void get_block(std::istream& in, ColumnBlock& b) {
    auto raw = b.raw();
    if constexpr (std::endian::native == std::endian::little) {
        if (!in.read(reinterpret_cast<char*>(raw.data()),
                     static_cast<std::streamsize>(raw.size() * sizeof(double))))
            throw IngestError("truncated shard file");
    } else {
        for (double& v : raw) v = get_le<double>(in);
    }
}

void put_ids(std::ostream& out, const std::vector<std::string>& ids) {
    for (const auto& id : ids) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
    }
}

void get_ids(std::istream& in, std::vector<std::string>& ids, std::size_t n) {
    ids.resize(n);
    for (auto& id : ids) {
        auto len = get_le<std::uint32_t>(in);
        id.resize(len);
        if (!in.read(id.data(), len)) throw IngestError("truncated shard file");
    }
}

}  // namespace

// Layout: "BKSH" | u16 version | u64 records | u32 d | u32 m | u64 control rows |
// control block | treated block | treated_order bytes | ids (u32 length + bytes).
void write_shard(const Shard& shard, std::ostream& out) {
    out.write("BKSH", 4);
    put_le<std::uint16_t>(out, kShardFormatVersion);
    put_le<std::uint64_t>(out, shard.record_count());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shard.control.dimension()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shard.control.outcome_count()));
    put_le<std::uint64_t>(out, shard.control.rows());
    put_block(out, shard.control);
    put_block(out, shard.treated);
    out.write(reinterpret_cast<const char*>(shard.treated_order.data()),
              static_cast<std::streamsize>(shard.treated_order.size()));
    put_ids(out, shard.control_ids);
    put_ids(out, shard.treated_ids);
    if (!out) throw IngestError("failed writing shard");
}

Shard read_shard(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "BKSH", 4) != 0)
        throw IngestError("not a shard file (bad magic)");
    auto version = get_le<std::uint16_t>(in);
    if (version != kShardFormatVersion)
        throw IngestError("unsupported shard version " + std::to_string(version));
    auto records = get_le<std::uint64_t>(in);
    auto d = get_le<std::uint32_t>(in);
    auto m = get_le<std::uint32_t>(in);
    auto nc = get_le<std::uint64_t>(in);
    if (nc > records) throw IngestError("corrupt shard header");
    Shard sh;
    sh.control = ColumnBlock(nc, d, m);
    sh.treated = ColumnBlock(records - nc, d, m);
    get_block(in, sh.control);
    get_block(in, sh.treated);
    sh.treated_order.resize(records);
    if (!in.read(reinterpret_cast<char*>(sh.treated_order.data()), static_cast<std::streamsize>(records)))
        throw IngestError("truncated shard file");
    get_ids(in, sh.control_ids, nc);
    get_ids(in, sh.treated_ids, records - nc);
    return sh;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["covariates"] = ds.schema().covariates;
    meta["outcomes"] = ds.schema().outcomes;
    meta["shards"] = ds.shard_count();
    std::ofstream(dir / "schema.json") << meta.dump(2) << '\n';
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        char name[32];
        std::snprintf(name, sizeof name, "shard-%05zu.bksh", s);
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw IngestError("cannot write " + (dir / name).string());
        write_shard(ds.shard(s), out);
    }
}

Dataset read_dataset(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "schema.json");
    if (!meta_in) throw IngestError("cannot open '" + (dir / "schema.json").string() + "'");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::exception& e) {
        throw IngestError(std::string("bad schema.json: ") + e.what());
    }
    Schema schema{meta.at("covariates").get<std::vector<std::string>>(),
                  meta.at("outcomes").get<std::vector<std::string>>()};
    const auto n = meta.at("shards").get<std::size_t>();
    std::vector<Shard> shards;
    for (std::size_t s = 0; s < n; ++s) {
        char name[32];
        std::snprintf(name, sizeof name, "shard-%05zu.bksh", s);
        std::ifstream in(dir / name, std::ios::binary);
        if (!in) throw IngestError("cannot open '" + (dir / name).string() + "'");
        shards.push_back(read_shard(in));
    }
    return Dataset(std::move(schema), std::move(shards));
}

// ---------------------------------------------------------------------------
// Moments

Moment Moment::cross(std::size_t i, std::size_t j) {
    if (i == j) return second(i);
    return {MomentKind::cross, std::min(i, j), std::max(i, j)};
}

std::string Moment::name(const Schema& schema) const {
    auto col = [&](std::size_t j) {
        return j < schema.covariates.size() ? schema.covariates[j] : "x" + std::to_string(j);
    };
    switch (kind) {
        case MomentKind::first: return col(a);
        case MomentKind::second: return col(a) + "^2";
        case MomentKind::cross: return col(a) + "*" + col(b);
    }
    return {};
}

MomentSpec::MomentSpec(std::vector<Moment> moments) : moments_(std::move(moments)) {}

MomentSpec MomentSpec::first_moments(std::size_t d) {
    std::vector<Moment> v;
    for (std::size_t j = 0; j < d; ++j) v.push_back(Moment::first(j));
    return MomentSpec(std::move(v));
}

MomentSpec MomentSpec::first_and_second(std::size_t d) {
    std::vector<Moment> v;
    for (std::size_t j = 0; j < d; ++j) v.push_back(Moment::first(j));
    for (std::size_t j = 0; j < d; ++j) v.push_back(Moment::second(j));
    return MomentSpec(std::move(v));
}

void MomentSpec::validate(std::size_t d) const {
    if (moments_.empty()) throw ValidationError("moment spec is empty");
    std::set<Moment> seen;
    for (const auto& mo : moments_) {
        if (mo.a >= d || (mo.kind == MomentKind::cross && (mo.b >= d || mo.a == mo.b)))
            throw ValidationError("moment references covariate index out of range");
        if (!seen.insert(mo).second) throw ValidationError("moment spec contains duplicates");
    }
}

std::vector<std::string> MomentSpec::names(const Schema& schema) const {
    std::vector<std::string> out;
    for (const auto& mo : moments_) out.push_back(mo.name(schema));
    return out;
}

namespace {

void eval_moment(const ColumnBlock& b, const Moment& mo, std::span<double> out) {
    auto xa = b.covariate(mo.a);
    switch (mo.kind) {
        case MomentKind::first:
            std::copy(xa.begin(), xa.end(), out.begin());
            break;
        case MomentKind::second:
            for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] * xa[i];
            break;
        case MomentKind::cross: {
            auto xb = b.covariate(mo.b);
            for (std::size_t i = 0; i < xa.size(); ++i) out[i] = xa[i] * xb[i];
            break;
        }
    }
}

}  // namespace

TargetMoments compute_target_moments(const Dataset& ds, const MomentSpec& spec) {
    return compute_target_moments(ds, spec, EngineConfig{});
}

TargetMoments compute_target_moments(const Dataset& ds, const MomentSpec& spec,
                                     const EngineConfig& engine) {
    spec.validate(ds.dimension());
    if (ds.n_treated() == 0) throw ValidationError("no treated units");
    const std::size_t p = spec.size();
    Reduction<std::vector<double>> r;
    r.identity.assign(p, 0.0);
    r.combine = add_vectors;
    r.map = [&](const Shard& sh, std::size_t) {
        std::vector<double> acc(p, 0.0);
        std::vector<double> col(sh.treated.rows());
        for (std::size_t j = 0; j < p; ++j) {
            eval_moment(sh.treated, spec[j], col);
            double s = 0.0;
            for (double v : col) s += v;
            acc[j] = s;
        }
        return acc;
    };
    auto sums = run_reduction(ds, r, engine);
    for (double& v : sums) v /= static_cast<double>(ds.n_treated());
    return {std::move(sums), spec};
}

Dataset moment_features(const Dataset& ds, const MomentSpec& spec) {
    spec.validate(ds.dimension());
    const std::size_t p = spec.size(), m = ds.outcome_count();
    Schema schema{spec.names(ds.schema()), ds.schema().outcomes};
    std::vector<Shard> shards;
    shards.reserve(ds.shard_count());
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        const Shard& src = ds.shard(s);
        Shard out;
        out.control_ids = src.control_ids;
        out.treated_ids = src.treated_ids;
        out.treated_order = src.treated_order;
        for (auto [from, to] : {std::pair{&src.control, &out.control}, std::pair{&src.treated, &out.treated}}) {
            *to = ColumnBlock(from->rows(), p, m);
            for (std::size_t j = 0; j < p; ++j) eval_moment(*from, spec[j], to->covariate(j));
            for (std::size_t k = 0; k < m; ++k) {
                auto a = from->outcome(k);
                std::copy(a.begin(), a.end(), to->outcome(k).begin());
            }
        }
        shards.push_back(std::move(out));
    }
    return Dataset(std::move(schema), std::move(shards), false);
}

std::pair<Dataset, ScalingRecord> standardize(const Dataset& ds) {
    return standardize(ds, EngineConfig{});
}

std::pair<Dataset, ScalingRecord> standardize(const Dataset& ds, const EngineConfig& engine) {
    const std::size_t d = ds.dimension();
    const double n = static_cast<double>(ds.size());
    // Two passes: means, then centred sums of squares (avoids cancellation).
    Reduction<std::vector<double>> sum_pass;
    sum_pass.identity.assign(d, 0.0);
    sum_pass.combine = add_vectors;
    sum_pass.map = [&](const Shard& sh, std::size_t) {
        std::vector<double> acc(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            for (double v : sh.control.covariate(j)) acc[j] += v;
            for (double v : sh.treated.covariate(j)) acc[j] += v;
        }
        return acc;
    };
    auto means = run_reduction(ds, sum_pass, engine);
    for (double& v : means) v /= n;

    Reduction<std::vector<double>> ss_pass = sum_pass;
    ss_pass.map = [&](const Shard& sh, std::size_t) {
        std::vector<double> acc(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            for (const ColumnBlock* b : {&sh.control, &sh.treated}) {
                for (double v : b->covariate(j)) acc[j] += (v - means[j]) * (v - means[j]);
            }
        }
        return acc;
    };
    auto ss = run_reduction(ds, ss_pass, engine);

    ScalingRecord rec;
    rec.means = means;
    rec.sds.resize(d);
    rec.zero_variance.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        rec.sds[j] = std::sqrt(ss[j] / n);
        rec.zero_variance[j] = !(rec.sds[j] > 1e-12 * std::max(1.0, std::abs(means[j])));
    }

    std::vector<Shard> shards;
    shards.reserve(ds.shard_count());
    for (std::size_t s = 0; s < ds.shard_count(); ++s) {
        Shard out = ds.shard(s);
        for (ColumnBlock* b : {&out.control, &out.treated}) {
            for (std::size_t j = 0; j < d; ++j) {
                if (rec.zero_variance[j]) continue;
                for (double& v : b->covariate(j)) v = (v - means[j]) / rec.sds[j];
            }
        }
        shards.push_back(std::move(out));
    }
    return {Dataset(ds.schema(), std::move(shards), false), std::move(rec)};
}

}  // namespace balancekit
