#include "jdp/dataset.hpp"

#include "jdp/error.hpp"
#include "jdp/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace jdp {

namespace {

std::vector<std::string_view> split_row(std::string_view line)
{
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

double parse_real(std::string_view field, const std::string& file, std::size_t row, std::size_t col)
{
    double value = 0.0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    if (!field.empty() && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (field.empty() || ec != std::errc() || ptr != last)
        throw ParseError(file, row, col, "expected a real number, got '" + std::string(field) + "'");
    if (!std::isfinite(value)) throw ParseError(file, row, col, "value is not finite");
    return value;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::pair<std::size_t, std::vector<std::string>>> rows; // (1-based row, fields)
};

CsvTable read_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    CsvTable table;
    std::string line;
    std::size_t row = 0;
    const std::string file = path.string();
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (row == 1) {
            // tolerate a UTF-8 byte-order mark
            if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
            for (auto f : split_row(line)) table.header.emplace_back(f);
            continue;
        }
        if (line.empty()) continue;
        auto fields = split_row(line);
        if (fields.size() != table.header.size())
            throw ParseError(file, row, std::min(fields.size(), table.header.size()) + 1,
                             "expected " + std::to_string(table.header.size()) + " fields, got " +
                                 std::to_string(fields.size()));
        std::vector<std::string> owned(fields.begin(), fields.end());
        table.rows.emplace_back(row, std::move(owned));
    }
    if (row == 0) throw ParseError(file, 1, 1, "missing header");
    return table;
}

std::string format_real(double x)
{
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
    (void)ec;
    return std::string(buf, ptr);
}

} // namespace

long long round_half_even(double x)
{
    return static_cast<long long>(std::nearbyint(x));
}

Cohort Cohort::create(std::vector<SurvivalRecord> subjects, std::vector<LongitudinalRecord> measurements,
                      std::vector<std::string> covariate_schema)
{
    Cohort c;
    std::sort(subjects.begin(), subjects.end(),
              [](const SurvivalRecord& a, const SurvivalRecord& b) { return a.subject_id < b.subject_id; });
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        const auto& s = subjects[i];
        if (i > 0 && subjects[i - 1].subject_id == s.subject_id)
            throw IntegrityError("duplicate subject id '" + s.subject_id + "'");
        if (!(s.observed_time > 0.0) || !std::isfinite(s.observed_time))
            throw IntegrityError("subject '" + s.subject_id + "' has non-positive observed time");
        if (s.covariates.size() != covariate_schema.size())
            throw IntegrityError("subject '" + s.subject_id + "' has " + std::to_string(s.covariates.size()) +
                                 " covariates, schema has " + std::to_string(covariate_schema.size()));
        for (double w : s.covariates)
            if (!std::isfinite(w)) throw IntegrityError("subject '" + s.subject_id + "' has a non-finite covariate");
    }

    std::stable_sort(measurements.begin(), measurements.end(),
                     [](const LongitudinalRecord& a, const LongitudinalRecord& b) {
                         if (a.subject_id != b.subject_id) return a.subject_id < b.subject_id;
                         return a.time < b.time;
                     });

    c.offsets_.assign(subjects.size() + 1, 0);
    std::size_t m = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        c.offsets_[i] = m;
        const auto& s = subjects[i];
        // measurements for ids sorting before this subject are orphans
        if (m < measurements.size() && measurements[m].subject_id < s.subject_id)
            throw IntegrityError("measurement references unknown subject '" + measurements[m].subject_id + "'");
        while (m < measurements.size() && measurements[m].subject_id == s.subject_id) {
            const auto& r = measurements[m];
            if (!(r.time >= 0.0) || !std::isfinite(r.time) || !std::isfinite(r.value))
                throw IntegrityError("subject '" + s.subject_id + "' has an invalid measurement");
            if (!(r.time < s.observed_time))
                throw IntegrityError("subject '" + s.subject_id + "' has a measurement at time " + format_real(r.time) +
                                     " not before its observed time " + format_real(s.observed_time));
            if (m > c.offsets_[i] && measurements[m - 1].time == r.time)
                throw IntegrityError("subject '" + s.subject_id + "' has duplicate measurement time " +
                                     format_real(r.time));
            ++m;
        }
    }
    if (m < measurements.size())
        throw IntegrityError("measurement references unknown subject '" + measurements[m].subject_id + "'");
    c.offsets_[subjects.size()] = m;

    c.subjects_ = std::move(subjects);
    c.measurements_ = std::move(measurements);
    c.schema_ = std::move(covariate_schema);
    return c;
}

std::span<const LongitudinalRecord> Cohort::measurements_of(std::size_t i) const
{
    return std::span<const LongitudinalRecord>(measurements_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
}

std::optional<std::size_t> Cohort::find(const std::string& subject_id) const
{
    auto it = std::lower_bound(subjects_.begin(), subjects_.end(), subject_id,
                               [](const SurvivalRecord& s, const std::string& id) { return s.subject_id < id; });
    if (it == subjects_.end() || it->subject_id != subject_id) return std::nullopt;
    return static_cast<std::size_t>(it - subjects_.begin());
}

Cohort Cohort::subset_indices(std::span<const std::size_t> indices) const
{
    std::vector<std::size_t> sorted(indices.begin(), indices.end());
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

    Cohort c;
    c.schema_ = schema_;
    c.subjects_.reserve(sorted.size());
    c.offsets_.reserve(sorted.size() + 1);
    for (std::size_t i : sorted) {
        c.offsets_.push_back(c.measurements_.size());
        c.subjects_.push_back(subjects_[i]);
        auto ms = measurements_of(i);
        c.measurements_.insert(c.measurements_.end(), ms.begin(), ms.end());
    }
    c.offsets_.push_back(c.measurements_.size());
    return c;
}

Cohort Cohort::subset(std::span<const std::string> ids) const
{
    std::vector<std::size_t> idx;
    idx.reserve(ids.size());
    for (const auto& id : ids) {
        auto i = find(id);
        if (!i) throw IntegrityError("unknown subject '" + id + "'");
        idx.push_back(*i);
    }
    return subset_indices(idx);
}

std::size_t Cohort::event_count() const noexcept
{
    return static_cast<std::size_t>(
        std::count_if(subjects_.begin(), subjects_.end(), [](const SurvivalRecord& s) { return s.event; }));
}

Cohort load_cohort(const std::filesystem::path& longitudinal_path, const std::filesystem::path& survival_path)
{
    const auto surv = read_csv(survival_path);
    const std::string sfile = survival_path.string();
    if (surv.header.size() < 3 || surv.header[0] != "subject_id" || surv.header[1] != "observed_time" ||
        surv.header[2] != "event")
        throw ParseError(sfile, 1, 1, "survival header must start with subject_id,observed_time,event");
    std::vector<std::string> schema(surv.header.begin() + 3, surv.header.end());

    std::vector<SurvivalRecord> subjects;
    subjects.reserve(surv.rows.size());
    for (const auto& [row, f] : surv.rows) {
        SurvivalRecord s;
        if (f[0].empty()) throw ParseError(sfile, row, 1, "empty subject_id");
        s.subject_id = f[0];
        s.observed_time = parse_real(f[1], sfile, row, 2);
        if (f[2] == "1") s.event = true;
        else if (f[2] == "0") s.event = false;
        else throw ParseError(sfile, row, 3, "event must be 0 or 1, got '" + f[2] + "'");
        for (std::size_t j = 3; j < f.size(); ++j) s.covariates.push_back(parse_real(f[j], sfile, row, j + 1));
        subjects.push_back(std::move(s));
    }

    const auto lon = read_csv(longitudinal_path);
    const std::string lfile = longitudinal_path.string();
    if (lon.header != std::vector<std::string>{"subject_id", "time", "value"})
        throw ParseError(lfile, 1, 1, "longitudinal header must be subject_id,time,value");
    std::vector<LongitudinalRecord> measurements;
    measurements.reserve(lon.rows.size());
    for (const auto& [row, f] : lon.rows) {
        if (f[0].empty()) throw ParseError(lfile, row, 1, "empty subject_id");
        measurements.push_back({f[0], parse_real(f[1], lfile, row, 2), parse_real(f[2], lfile, row, 3)});
    }
    auto cohort = Cohort::create(std::move(subjects), std::move(measurements), std::move(schema));
    for (std::size_t i = 0; i < cohort.size(); ++i)
        if (cohort.measurements_of(i).empty())
            throw IntegrityError("subject '" + cohort.subject(i).subject_id + "' has no longitudinal measurements");
    return cohort;
}

void emit_cohort(const Cohort& cohort, const std::filesystem::path& longitudinal_path,
                 const std::filesystem::path& survival_path)
{
    {
        std::ofstream out(longitudinal_path, std::ios::binary);
        if (!out) throw Error("cannot write " + longitudinal_path.string());
        out << "subject_id,time,value\n";
        for (const auto& r : cohort.measurements())
            out << r.subject_id << ',' << format_real(r.time) << ',' << format_real(r.value) << '\n';
        if (!out) throw Error("write failed for " + longitudinal_path.string());
    }
    std::ofstream out(survival_path, std::ios::binary);
    if (!out) throw Error("cannot write " + survival_path.string());
    out << "subject_id,observed_time,event";
    for (const auto& name : cohort.covariate_schema()) out << ',' << name;
    out << '\n';
    for (const auto& s : cohort.subjects()) {
        out << s.subject_id << ',' << format_real(s.observed_time) << ',' << (s.event ? '1' : '0');
        for (double w : s.covariates) out << ',' << format_real(w);
        out << '\n';
    }
    if (!out) throw Error("write failed for " + survival_path.string());
}

Cohort truncate_history(const Cohort& cohort, double t)
{
    if (!(t > 0.0)) throw InvalidArgument("truncate_history requires t > 0");
    std::vector<SurvivalRecord> subjects;
    std::vector<LongitudinalRecord> measurements;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subject(i);
        if (!(s.observed_time > t)) continue;
        subjects.push_back(s);
        for (const auto& r : cohort.measurements_of(i))
            if (r.time <= t) measurements.push_back(r);
    }
    if (subjects.empty()) {
        std::ostringstream msg;
        msg << "no subject is still at risk after t=" << t;
        throw EmptyResultError(msg.str());
    }
    return Cohort::create(std::move(subjects), std::move(measurements), cohort.covariate_schema());
}

std::vector<std::size_t> FoldAssignment::fold_sizes() const
{
    std::vector<std::size_t> sizes(static_cast<std::size_t>(K), 0);
    for (int f : fold) ++sizes[static_cast<std::size_t>(f)];
    return sizes;
}

FoldAssignment kfold_split(const Cohort& cohort, int K, std::uint64_t seed)
{
    if (K < 2 || static_cast<std::size_t>(K) > cohort.size())
        throw InvalidArgument("K must satisfy 2 <= K <= n (K=" + std::to_string(K) + ", n=" +
                              std::to_string(cohort.size()) + ")");
    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    // Fisher–Yates with a portable bounded draw
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    FoldAssignment out;
    out.K = K;
    out.fold.assign(cohort.size(), 0);
    out.subject_ids.reserve(cohort.size());
    for (const auto& s : cohort.subjects()) out.subject_ids.push_back(s.subject_id);
    for (std::size_t pos = 0; pos < order.size(); ++pos)
        out.fold[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(K));
    return out;
}

std::pair<Cohort, Cohort> split_fold(const Cohort& cohort, const FoldAssignment& folds, int k)
{
    if (folds.subject_ids.size() != cohort.size()) throw InvalidArgument("fold assignment does not match cohort");
    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (folds.subject_ids[i] != cohort.subject(i).subject_id)
            throw InvalidArgument("fold assignment does not match cohort");
        (folds.fold[i] == k ? test : train).push_back(i);
    }
    return {cohort.subset_indices(train), cohort.subset_indices(test)};
}

Cohort stratified_sample(const Cohort& cohort, int n, double event_rate, std::uint64_t seed)
{
    if (n < 0 || !(event_rate >= 0.0 && event_rate <= 1.0))
        throw InvalidArgument("stratified_sample requires n >= 0 and event_rate in [0, 1]");
    const auto n_events = static_cast<std::size_t>(round_half_even(event_rate * n));
    const std::size_t n_censored = static_cast<std::size_t>(n) - n_events;

    std::vector<std::size_t> events, censored;
    for (std::size_t i = 0; i < cohort.size(); ++i) (cohort.subject(i).event ? events : censored).push_back(i);
    if (events.size() < n_events)
        throw StratumError("requested " + std::to_string(n_events) + " events but the cohort has " +
                           std::to_string(events.size()));
    if (censored.size() < n_censored)
        throw StratumError("requested " + std::to_string(n_censored) + " censored subjects but the cohort has " +
                           std::to_string(censored.size()));

    Rng rng(seed);
    auto take = [&rng](std::vector<std::size_t>& pool, std::size_t k) {
        // partial Fisher–Yates
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
    };
    take(events, n_events);
    take(censored, n_censored);
    events.insert(events.end(), censored.begin(), censored.end());
    return cohort.subset_indices(events);
}

} // namespace jdp
