#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "csv.hpp"
#include "error.hpp"
#include "numeric.hpp"

namespace covadj {

enum class Role { Outcome, Arm, Covariate, Stratum, Time, Event, Id };
enum class Kind { Real, Count, Binary, Categorical };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::Outcome: return "outcome";
    case Role::Arm: return "arm";
    case Role::Covariate: return "covariate";
    case Role::Stratum: return "stratum";
    case Role::Time: return "time";
    case Role::Event: return "event";
    case Role::Id: return "id";
  }
  return "?";
}

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Real: return "real";
    case Kind::Count: return "count";
    case Kind::Binary: return "binary";
    case Kind::Categorical: return "categorical";
  }
  return "?";
}

struct ColumnSchema {
  std::string name;
  Role role = Role::Covariate;
  Kind kind = Kind::Real;
  std::vector<std::string> levels;  // categorical only, in reference-first order
};

/// Checks the column-set invariants: unique names, exactly one arm column, at
/// most one outcome, time/event paired, sane categorical level lists.
inline void validate_schema(const std::vector<ColumnSchema>& schema) {
  std::unordered_set<std::string> names;
  int arms = 0, outcomes = 0, times = 0, events = 0;
  for (const auto& col : schema) {
    require(!col.name.empty(), ErrorCode::SchemaError, "empty column name");
    require(names.insert(col.name).second, ErrorCode::SchemaError, "duplicate column '" + col.name + "'");
    if (col.kind == Kind::Categorical) {
      require(!col.levels.empty(), ErrorCode::SchemaError, "categorical column '" + col.name + "' has no levels");
      std::set<std::string> uniq(col.levels.begin(), col.levels.end());
      require(uniq.size() == col.levels.size(), ErrorCode::SchemaError,
              "duplicate level in column '" + col.name + "'");
    } else {
      require(col.levels.empty(), ErrorCode::SchemaError, "levels given for non-categorical column '" + col.name + "'");
    }
    switch (col.role) {
      case Role::Arm:
        ++arms;
        require(col.kind != Kind::Real, ErrorCode::SchemaError, "arm column must be binary, count or categorical");
        break;
      case Role::Outcome: ++outcomes; break;
      case Role::Stratum:
        require(col.kind == Kind::Categorical || col.kind == Kind::Binary, ErrorCode::SchemaError,
                "stratum column '" + col.name + "' must be categorical or binary");
        break;
      case Role::Time:
        ++times;
        require(col.kind == Kind::Real || col.kind == Kind::Count, ErrorCode::SchemaError, "time column must be numeric");
        break;
      case Role::Event:
        ++events;
        require(col.kind == Kind::Binary, ErrorCode::SchemaError, "event column must be binary");
        break;
      default: break;
    }
  }
  require(arms == 1, ErrorCode::SchemaError, "schema needs exactly one arm column");
  require(outcomes <= 1, ErrorCode::SchemaError, "schema allows at most one outcome column");
  require(times <= 1 && events <= 1 && times == events, ErrorCode::SchemaError,
          "time and event columns must appear together");
}

inline Role role_from_string(const std::string& s) {
  static const std::map<std::string, Role> table{{"outcome", Role::Outcome}, {"arm", Role::Arm},
                                                 {"covariate", Role::Covariate}, {"stratum", Role::Stratum},
                                                 {"time", Role::Time}, {"event", Role::Event}, {"id", Role::Id}};
  auto it = table.find(s);
  require(it != table.end(), ErrorCode::SchemaError, "unknown role '" + s + "'");
  return it->second;
}

inline Kind kind_from_string(const std::string& s) {
  static const std::map<std::string, Kind> table{
      {"real", Kind::Real}, {"count", Kind::Count}, {"binary", Kind::Binary}, {"categorical", Kind::Categorical}};
  auto it = table.find(s);
  require(it != table.end(), ErrorCode::SchemaError, "unknown kind '" + s + "'");
  return it->second;
}

/// Sidecar schema document: array of {name, role, kind, levels?}.
inline std::vector<ColumnSchema> schema_from_json(const nlohmann::json& doc) {
  require(doc.is_array(), ErrorCode::SchemaError, "schema document must be a JSON array");
  std::vector<ColumnSchema> out;
  for (const auto& item : doc) {
    try {
      ColumnSchema col;
      col.name = item.at("name").get<std::string>();
      col.role = role_from_string(item.at("role").get<std::string>());
      // id columns keep raw text, so their kind may be omitted
      col.kind = col.role == Role::Id && !item.contains("kind") ? Kind::Real
                                                                : kind_from_string(item.at("kind").get<std::string>());
      if (item.contains("levels")) col.levels = item.at("levels").get<std::vector<std::string>>();
      out.push_back(std::move(col));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::SchemaError, e.what());
    }
  }
  validate_schema(out);
  return out;
}

inline nlohmann::json schema_to_json(const std::vector<ColumnSchema>& schema) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& col : schema) {
    nlohmann::json item{{"name", col.name}, {"role", to_string(col.role)}, {"kind", to_string(col.kind)}};
    if (col.kind == Kind::Categorical) item["levels"] = col.levels;
    doc.push_back(item);
  }
  return doc;
}

/// One typed column. Numeric kinds hold their value; categorical columns hold
/// the 0-based level code; id columns keep raw text.
struct Column {
  ColumnSchema schema;
  std::vector<double> values;
  std::vector<std::string> text;
};

inline Column numeric_column(std::string name, Role role, Kind kind, std::vector<double> values) {
  return {{std::move(name), role, kind, {}}, std::move(values), {}};
}

inline Column categorical_column(std::string name, Role role, std::vector<std::string> levels, std::vector<int> codes) {
  return {{std::move(name), role, Kind::Categorical, std::move(levels)}, std::vector<double>(codes.begin(), codes.end()), {}};
}

inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_integer(double v) { return std::to_string(static_cast<long long>(std::llround(v))); }

/// Validated, immutable columnar trial data.
class TrialDataset {
 public:
  /// Builds a dataset from typed columns (schema order). Derives arm labels,
  /// arm indices and the joint stratum index, and enforces the dataset
  /// invariants. Arm indices are 0-based positions into arms().
  static TrialDataset from_columns(std::vector<Column> columns) {
    std::vector<ColumnSchema> schema;
    for (const auto& c : columns) schema.push_back(c.schema);
    validate_schema(schema);
    require(!columns.empty(), ErrorCode::ValidationError, "no columns");

    TrialDataset ds;
    ds.n_ = columns.front().schema.role == Role::Id ? columns.front().text.size() : columns.front().values.size();
    for (const auto& c : columns) {
      const std::size_t len = c.schema.role == Role::Id ? c.text.size() : c.values.size();
      require(len == ds.n_, ErrorCode::DimensionMismatch, "column '" + c.schema.name + "' has wrong length");
      if (c.schema.role == Role::Id) continue;
      for (std::size_t i = 0; i < len; ++i) {
        const double v = c.values[i];
        require(std::isfinite(v), ErrorCode::MissingValue,
                "row " + std::to_string(i + 1) + ", column '" + c.schema.name + "'");
        switch (c.schema.kind) {
          case Kind::Binary:
            require(v == 0.0 || v == 1.0, ErrorCode::ValidationError, "binary column '" + c.schema.name + "' not 0/1");
            break;
          case Kind::Count:
            require(v >= 0.0 && v == std::floor(v), ErrorCode::ValidationError,
                    "count column '" + c.schema.name + "' not a non-negative integer");
            break;
          case Kind::Categorical:
            require(v >= 0.0 && v < static_cast<double>(c.schema.levels.size()) && v == std::floor(v),
                    ErrorCode::UnknownLevel, "column '" + c.schema.name + "'");
            break;
          case Kind::Real: break;
        }
        if (c.schema.role == Role::Time)
          require(v > 0.0, ErrorCode::ValidationError, "time must be positive (row " + std::to_string(i + 1) + ")");
      }
    }
    require(ds.n_ >= 1, ErrorCode::ValidationError, "dataset has no rows");
    ds.columns_ = std::move(columns);
    for (std::size_t j = 0; j < ds.columns_.size(); ++j) ds.index_[ds.columns_[j].schema.name] = j;
    ds.derive_arms();
    std::vector<std::string> strata_cols;
    for (const auto& c : ds.columns_)
      if (c.schema.role == Role::Stratum) strata_cols.push_back(c.schema.name);
    ds.strata_columns_ = strata_cols;
    ds.strata_ = ds.joint_levels(strata_cols, &ds.stratum_labels_);
    return ds;
  }

  std::size_t n() const { return n_; }
  std::size_t k() const { return arms_.size(); }
  const std::vector<std::string>& arms() const { return arms_; }
  std::span<const int> arm_of() const { return arm_of_; }
  int arm_index(const std::string& label) const {
    auto it = std::find(arms_.begin(), arms_.end(), label);
    require(it != arms_.end(), ErrorCode::ValidationError, "unknown arm label '" + label + "'");
    return static_cast<int>(it - arms_.begin());
  }
  std::vector<std::size_t> arm_counts() const {
    std::vector<std::size_t> counts(k(), 0);
    for (int a : arm_of_) ++counts[a];
    return counts;
  }
  std::vector<std::size_t> rows_in_arm(int a) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n_; ++i)
      if (arm_of_[i] == a) rows.push_back(i);
    return rows;
  }

  const std::vector<Column>& columns() const { return columns_; }
  std::vector<ColumnSchema> schema() const {
    std::vector<ColumnSchema> s;
    for (const auto& c : columns_) s.push_back(c.schema);
    return s;
  }
  bool has_column(const std::string& name) const { return index_.count(name) > 0; }
  const Column& column(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::ValidationError, "no column named '" + name + "'");
    return columns_[it->second];
  }

  const Column* column_with_role(Role role) const {
    for (const auto& c : columns_)
      if (c.schema.role == role) return &c;
    return nullptr;
  }
  bool has_outcome() const { return column_with_role(Role::Outcome) != nullptr; }
  std::span<const double> outcome() const {
    const Column* c = column_with_role(Role::Outcome);
    require(c != nullptr, ErrorCode::ValidationError, "dataset has no outcome column");
    return c->values;
  }
  bool has_survival() const { return column_with_role(Role::Time) != nullptr; }
  std::span<const double> time() const {
    const Column* c = column_with_role(Role::Time);
    require(c != nullptr, ErrorCode::ValidationError, "dataset has no time column");
    return c->values;
  }
  std::span<const double> event() const {
    const Column* c = column_with_role(Role::Event);
    require(c != nullptr, ErrorCode::ValidationError, "dataset has no event column");
    return c->values;
  }

  /// Joint stratum index over all stratum-role columns, 0-based; rows with no
  /// stratum columns all sit in stratum 0.
  std::span<const int> strata_index() const { return strata_; }
  std::size_t num_strata() const { return stratum_labels_.size(); }
  const std::vector<std::string>& stratum_labels() const { return stratum_labels_; }
  const std::vector<std::string>& strata_columns() const { return strata_columns_; }

  /// Joint level index over the named categorical/binary columns. Observed
  /// level combinations are sorted lexicographically (first column most
  /// significant, levels in schema order) and numbered 0..L-1.
  std::vector<int> joint_levels(const std::vector<std::string>& cols, std::vector<std::string>* labels = nullptr) const {
    std::vector<const Column*> refs;
    for (const auto& name : cols) {
      const Column& c = column(name);
      require(c.schema.kind == Kind::Categorical || c.schema.kind == Kind::Binary, ErrorCode::ValidationError,
              "column '" + name + "' is not categorical");
      refs.push_back(&c);
    }
    std::vector<std::vector<int>> tuples(n_, std::vector<int>(refs.size()));
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < refs.size(); ++j) tuples[i][j] = static_cast<int>(refs[j]->values[i]);
    std::map<std::vector<int>, int> order;
    for (const auto& t : tuples) order.emplace(t, 0);
    int next = 0;
    std::vector<std::string> names;
    for (auto& [t, idx] : order) {
      idx = next++;
      std::string label;
      for (std::size_t j = 0; j < refs.size(); ++j) {
        if (j) label += "|";
        const auto& s = refs[j]->schema;
        label += s.kind == Kind::Categorical ? s.levels[t[j]] : std::to_string(t[j]);
      }
      names.push_back(refs.empty() ? std::string("all") : label);
    }
    std::vector<int> out(n_);
    for (std::size_t i = 0; i < n_; ++i) out[i] = order.at(tuples[i]);
    if (labels) *labels = std::move(names);
    return out;
  }

  /// Text form of cell (row, column) as written by write_csv.
  std::string cell_text(const Column& c, std::size_t row) const {
    const auto& s = c.schema;
    if (s.role == Role::Id) return c.text[row];
    if (s.role == Role::Arm) return arms_[arm_of_[row]];
    switch (s.kind) {
      case Kind::Real: return format_real(c.values[row]);
      case Kind::Count:
      case Kind::Binary: return format_integer(c.values[row]);
      case Kind::Categorical: return s.levels[static_cast<std::size_t>(c.values[row])];
    }
    return {};
  }

 private:
  void derive_arms() {
    const Column* arm = column_with_role(Role::Arm);
    arm_of_.assign(n_, 0);
    if (arm->schema.kind == Kind::Categorical) {
      arms_ = arm->schema.levels;
      require(arms_.size() >= 2, ErrorCode::ArmCountBelowTwo, "arm column declares fewer than two levels");
      for (std::size_t i = 0; i < n_; ++i) arm_of_[i] = static_cast<int>(arm->values[i]);
    } else {
      std::set<double> distinct(arm->values.begin(), arm->values.end());
      require(distinct.size() >= 2, ErrorCode::ArmCountBelowTwo, "arm column has fewer than two distinct labels");
      std::vector<double> sorted(distinct.begin(), distinct.end());
      for (double v : sorted) arms_.push_back(format_integer(v));
      for (std::size_t i = 0; i < n_; ++i)
        arm_of_[i] = static_cast<int>(std::lower_bound(sorted.begin(), sorted.end(), arm->values[i]) - sorted.begin());
    }
    auto counts = arm_counts();
    for (std::size_t a = 0; a < counts.size(); ++a)
      require(counts[a] >= 1, ErrorCode::EmptyArm, "arm '" + arms_[a] + "' has no observations");
  }

  std::size_t n_ = 0;
  std::vector<Column> columns_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> arms_;
  std::vector<int> arm_of_;
  std::vector<int> strata_;
  std::vector<std::string> stratum_labels_;
  std::vector<std::string> strata_columns_;
};

namespace detail {
inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "na" || s == "NaN"; }

inline double parse_number(const std::string& s, const std::string& col, std::size_t row) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(v), ErrorCode::ParseError,
          "row " + std::to_string(row) + ", column '" + col + "': '" + s + "' is not a number");
  return v;
}
}  // namespace detail

/// Reads CSV text (header row required) under the given schema. The header
/// must name exactly the schema columns, in any order.
inline TrialDataset load_dataset(std::istream& in, const std::vector<ColumnSchema>& schema) {
  validate_schema(schema);
  auto rows = csv::parse(in);
  require(!rows.empty(), ErrorCode::ParseError, "missing header row");
  const auto& header = rows.front();
  require(header.size() == schema.size(), ErrorCode::SchemaError, "header does not match schema columns");
  std::vector<std::size_t> source(schema.size());
  for (std::size_t j = 0; j < schema.size(); ++j) {
    auto it = std::find(header.begin(), header.end(), schema[j].name);
    require(it != header.end(), ErrorCode::SchemaError, "header lacks column '" + schema[j].name + "'");
    source[j] = static_cast<std::size_t>(it - header.begin());
  }

  std::vector<Column> columns;
  for (const auto& s : schema) columns.push_back(Column{s, {}, {}});
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    require(row.size() == header.size(), ErrorCode::ParseError,
            "row " + std::to_string(r) + " has " + std::to_string(row.size()) + " fields");
    for (std::size_t j = 0; j < schema.size(); ++j) {
      const auto& s = schema[j];
      const std::string& cell = row[source[j]];
      auto& col = columns[j];
      if (s.role == Role::Id) {
        col.text.push_back(cell);
        continue;
      }
      require(!detail::is_missing(cell), ErrorCode::MissingValue,
              "row " + std::to_string(r) + ", column '" + s.name + "'");
      switch (s.kind) {
        case Kind::Real: col.values.push_back(detail::parse_number(cell, s.name, r)); break;
        case Kind::Count: {
          const double v = detail::parse_number(cell, s.name, r);
          require(v >= 0 && v == std::floor(v), ErrorCode::ParseError,
                  "row " + std::to_string(r) + ", column '" + s.name + "': not a count");
          col.values.push_back(v);
          break;
        }
        case Kind::Binary:
          require(cell == "0" || cell == "1", ErrorCode::ParseError,
                  "row " + std::to_string(r) + ", column '" + s.name + "': expected 0 or 1");
          col.values.push_back(cell == "1" ? 1.0 : 0.0);
          break;
        case Kind::Categorical: {
          auto it = std::find(s.levels.begin(), s.levels.end(), cell);
          require(it != s.levels.end(), ErrorCode::UnknownLevel, "column '" + s.name + "', value '" + cell + "'");
          col.values.push_back(static_cast<double>(it - s.levels.begin()));
          break;
        }
      }
    }
  }
  return TrialDataset::from_columns(std::move(columns));
}

inline TrialDataset load_dataset(const std::string& csv_text, const std::vector<ColumnSchema>& schema) {
  std::istringstream in(csv_text);
  return load_dataset(in, schema);
}

/// Writes the dataset in schema column order. Reals use the shortest decimal
/// text that round-trips exactly.
inline void write_csv(std::ostream& out, const TrialDataset& data) {
  csv::Row header;
  for (const auto& c : data.columns()) header.push_back(c.schema.name);
  csv::write_row(out, header);
  for (std::size_t i = 0; i < data.n(); ++i) {
    csv::Row row;
    for (const auto& c : data.columns()) row.push_back(data.cell_text(c, i));
    csv::write_row(out, row);
  }
}

// ---------------------------------------------------------------------------
// Model specification and design matrices
// ---------------------------------------------------------------------------

struct ModelSpec {
  std::string response;             // empty for covariate-only designs
  std::vector<std::string> terms;   // main effects
  bool arm_interactions = false;
  bool include_strata = false;
  bool pooled = true;
};

struct DesignMatrix {
  Matrix values;
  std::vector<std::string> column_names;
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> term_map;  // [begin, end)
  std::map<std::string, std::string> reference_levels;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
  std::pair<Eigen::Index, Eigen::Index> range(const std::string& term) const {
    for (const auto& [name, r] : term_map)
      if (name == term) return r;
    fail(ErrorCode::ValidationError, "design has no term '" + term + "'");
  }
};

inline void validate_model_spec(const TrialDataset& data, const ModelSpec& spec) {
  if (!spec.response.empty()) {
    require(data.has_column(spec.response), ErrorCode::ValidationError, "no response column '" + spec.response + "'");
    require(data.column(spec.response).schema.role == Role::Outcome, ErrorCode::ValidationError,
            "response '" + spec.response + "' does not have role outcome");
  }
  std::set<std::string> seen;
  for (const auto& t : spec.terms) {
    require(data.has_column(t), ErrorCode::ValidationError, "model term references unknown column '" + t + "'");
    const Role r = data.column(t).schema.role;
    require(r == Role::Covariate || r == Role::Stratum, ErrorCode::ValidationError,
            "model term '" + t + "' must be a covariate or stratum column");
    require(seen.insert(t).second, ErrorCode::ValidationError, "model term '" + t + "' listed twice");
  }
}

namespace detail {
inline DesignMatrix build_design_impl(const TrialDataset& data, const ModelSpec& spec, std::optional<int> arm_override) {
  validate_model_spec(data, spec);
  const auto n = static_cast<Eigen::Index>(data.n());

  std::vector<Vector> cols;
  DesignMatrix dm;
  auto push = [&](std::string name, Vector v) {
    dm.column_names.push_back(std::move(name));
    cols.push_back(std::move(v));
  };

  push("(intercept)", Vector::Ones(n));
  dm.term_map.push_back({"(intercept)", {0, 1}});

  // Main effects in schema order.
  for (const auto& col : data.columns()) {
    if (std::find(spec.terms.begin(), spec.terms.end(), col.schema.name) == spec.terms.end()) continue;
    const auto begin = static_cast<Eigen::Index>(cols.size());
    if (col.schema.kind == Kind::Categorical) {
      dm.reference_levels[col.schema.name] = col.schema.levels.front();
      for (std::size_t l = 1; l < col.schema.levels.size(); ++l) {
        Vector v(n);
        for (Eigen::Index i = 0; i < n; ++i) v(i) = col.values[i] == static_cast<double>(l) ? 1.0 : 0.0;
        push(col.schema.name + "[" + col.schema.levels[l] + "]", std::move(v));
      }
    } else {
      push(col.schema.name, Eigen::Map<const Vector>(col.values.data(), n));
    }
    dm.term_map.push_back({col.schema.name, {begin, static_cast<Eigen::Index>(cols.size())}});
  }

  if (spec.include_strata) {
    const auto begin = static_cast<Eigen::Index>(cols.size());
    const auto strata = data.strata_index();
    for (std::size_t l = 1; l < data.num_strata(); ++l) {
      Vector v(n);
      for (Eigen::Index i = 0; i < n; ++i) v(i) = strata[i] == static_cast<int>(l) ? 1.0 : 0.0;
      push("strata[" + data.stratum_labels()[l] + "]", std::move(v));
    }
    if (!data.stratum_labels().empty()) dm.reference_levels["strata"] = data.stratum_labels().front();
    dm.term_map.push_back({"strata", {begin, static_cast<Eigen::Index>(cols.size())}});
  }

  const auto covariate_end = static_cast<Eigen::Index>(cols.size());
  if (spec.pooled) {
    const auto arms = data.arm_of();
    std::vector<Vector> indicators;
    const auto begin = static_cast<Eigen::Index>(cols.size());
    for (std::size_t a = 1; a < data.k(); ++a) {
      Vector v(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int arm = arm_override ? *arm_override : arms[i];
        v(i) = arm == static_cast<int>(a) ? 1.0 : 0.0;
      }
      indicators.push_back(v);
      push("arm[" + data.arms()[a] + "]", std::move(v));
    }
    dm.reference_levels["arm"] = data.arms().front();
    dm.term_map.push_back({"arm", {begin, static_cast<Eigen::Index>(cols.size())}});
    if (spec.arm_interactions) {
      for (std::size_t a = 1; a < data.k(); ++a) {
        const auto block = static_cast<Eigen::Index>(cols.size());
        for (Eigen::Index j = 1; j < covariate_end; ++j) {
          Vector v = indicators[a - 1].cwiseProduct(cols[j]);
          push("arm[" + data.arms()[a] + "]:" + dm.column_names[j], std::move(v));
        }
        dm.term_map.push_back({"arm[" + data.arms()[a] + "]:covariates", {block, static_cast<Eigen::Index>(cols.size())}});
      }
    }
  }

  dm.values.resize(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) dm.values.col(static_cast<Eigen::Index>(j)) = cols[j];

  if (!arm_override) {
    for (Eigen::Index j = 0; j < dm.values.cols(); ++j)
      require(dm.values.col(j).cwiseAbs().maxCoeff() > 0.0, ErrorCode::RankDeficient,
              "design column '" + dm.column_names[j] + "' is identically zero");
  }
  return dm;
}
}  // namespace detail

/// Design matrix for `spec`: intercept, main effects (schema order; categorical
/// columns dummy-coded against their first level), optional joint-strata
/// dummies, then (pooled only) arm indicators and arm-by-covariate blocks.
inline DesignMatrix build_design(const TrialDataset& data, const ModelSpec& spec) {
  return detail::build_design_impl(data, spec, std::nullopt);
}

/// Same columns as build_design, but every row's arm indicators are set to
/// `arm`. Used to predict potential-outcome means from pooled fits.
inline DesignMatrix counterfactual_design(const TrialDataset& data, const ModelSpec& spec, int arm) {
  require(arm >= 0 && static_cast<std::size_t>(arm) < data.k(), ErrorCode::InvalidArgument, "arm out of range");
  return detail::build_design_impl(data, spec, arm);
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

inline Vector select_rows(std::span<const double> v, std::span<const std::size_t> rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out(static_cast<Eigen::Index>(r)) = v[rows[r]];
  return out;
}

}  // namespace covadj
