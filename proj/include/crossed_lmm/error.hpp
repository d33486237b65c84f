#pragma once

#include <stdexcept>
#include <string>

namespace crossed_lmm {

// Base of every error raised by the library. name() is the stable error
// identifier reported by the command-line tool.
class Error : public std::runtime_error {
public:
    Error(std::string name, const std::string& what)
        : std::runtime_error(name + ": " + what), name_(std::move(name)) {}

    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

class DimensionMismatch : public Error {
public:
    explicit DimensionMismatch(const std::string& what) : Error("DimensionMismatch", what) {}
};

// A triangular factor has a diagonal entry below the rank tolerance.
// block() is the offending level-1 block, or -1 for the global factor.
class RankDeficient : public Error {
public:
    RankDeficient(long block, const std::string& what)
        : Error("RankDeficient", what), block_(block) {}

    long block() const noexcept { return block_; }
    bool global() const noexcept { return block_ < 0; }

private:
    long block_;
};

class NonSPD : public Error {
public:
    explicit NonSPD(const std::string& matrix) : Error("NonSPD", matrix + " is not positive definite") {}
};

class TooLarge : public Error {
public:
    explicit TooLarge(const std::string& what) : Error("TooLarge", what) {}
};

class Diverged : public Error {
public:
    explicit Diverged(const std::string& what) : Error("Diverged", what) {}
};

class IndexOutOfRange : public Error {
public:
    explicit IndexOutOfRange(const std::string& what) : Error("IndexOutOfRange", what) {}
};

class InactiveUser : public Error {
public:
    explicit InactiveUser(const std::string& what) : Error("InactiveUser", what) {}
};

class EmptyWeek : public Error {
public:
    explicit EmptyWeek(int week)
        : Error("EmptyWeek", "no decisions in week " + std::to_string(week)), week_(week) {}
    int week() const { return week_; }

private:
    int week_;
};

class DegenerateData : public Error {
public:
    explicit DegenerateData(const std::string& what) : Error("DegenerateData", what) {}
};

// Malformed input file. Carries the offending row (1-based, 0 for header or
// whole-document problems) and field.
class SchemaError : public Error {
public:
    SchemaError(long row, std::string field, const std::string& what)
        : Error("SchemaError", location(row, field) + what), row_(row), field_(std::move(field)) {}

    long row() const noexcept { return row_; }
    const std::string& field() const noexcept { return field_; }

private:
    static std::string location(long row, const std::string& field) {
        std::string s;
        if (row > 0) s += "row " + std::to_string(row) + ", ";
        if (!field.empty()) s += "field '" + field + "': ";
        return s;
    }

    long row_;
    std::string field_;
};

}  // namespace crossed_lmm
