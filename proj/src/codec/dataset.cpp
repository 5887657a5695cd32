#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mmt/codec/codec.hpp"

namespace mmt::codec {

static_assert(std::endian::native == std::endian::little, "dataset payloads are written in host order");

namespace {

template <typename T>
void write_pod(std::ostream& out, const T* p, size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(T)));
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  const auto& b = ds.batch;
  nlohmann::json header{{"context_length", b.context_length},
                        {"rows", b.rows.size()},
                        {"text_size", ds.layout.text_size},
                        {"codebook_size", ds.layout.codebook_size},
                        {"rejected", b.rejected},
                        {"stats", nlohmann::json::parse(ds.stats_json)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot open for writing");
    out << "PKD1 " << header.dump() << '\n';
    for (const auto& r : b.rows) {
      if (r.tokens.size() != static_cast<size_t>(b.context_length) || r.weights.size() != r.tokens.size())
        throw std::invalid_argument("save_dataset: row length differs from context length");
      write_pod(out, r.tokens.data(), r.tokens.size());
      write_pod(out, r.weights.data(), r.weights.size());
      const auto n = static_cast<uint32_t>(r.docs.size());
      write_pod(out, &n, 1);
      for (const auto& d : r.docs) {
        const int32_t v[3] = {d.doc, d.offset, d.length};
        write_pod(out, v, 3);
        const uint8_t m = d.mode == Mode::generation ? 0 : 1;
        write_pod(out, &m, 1);
      }
    }
    if (!out) throw std::runtime_error(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open dataset");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();
  size_t pos = 0;
  auto fail = [&](const std::string& what) -> void { throw io::FormatError(path, pos, what); };
  if (data.rfind("PKD1 ", 0) != 0) fail("missing PKD1 magic");
  const size_t nl = data.find('\n');
  if (nl == std::string::npos) fail("header line is not terminated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(5, nl - 5));
  } catch (const nlohmann::json::exception& e) {
    pos = 5;
    fail(std::string("bad header JSON: ") + e.what());
  }
  Dataset ds;
  try {
    ds.layout = layout_vocab(header.at("text_size").get<int32_t>(), header.at("codebook_size").get<int32_t>());
    ds.batch.context_length = header.at("context_length").get<int32_t>();
    ds.batch.rejected = header.at("rejected").get<std::vector<int32_t>>();
    ds.stats_json = header.value("stats", nlohmann::json::object()).dump();
  } catch (const std::exception& e) {
    pos = 5;
    fail(std::string("bad header: ") + e.what());
  }
  const size_t rows = header.at("rows").get<size_t>();
  const auto L = static_cast<size_t>(ds.batch.context_length);
  if (L == 0) fail("context length must be positive");
  pos = nl + 1;
  auto read = [&](void* dst, size_t bytes, const char* what) {
    if (data.size() - pos < bytes) fail(std::string("truncated ") + what);
    std::memcpy(dst, data.data() + pos, bytes);
    pos += bytes;
  };
  for (size_t r = 0; r < rows; ++r) {
    PackedRow row;
    row.tokens.resize(L);
    row.weights.resize(L);
    read(row.tokens.data(), L * 4, "row tokens");
    read(row.weights.data(), L * 4, "row weights");
    uint32_t n = 0;
    read(&n, 4, "document count");
    if (n > L) fail("document count exceeds context length");
    for (uint32_t i = 0; i < n; ++i) {
      int32_t v[3];
      uint8_t m;
      read(v, 12, "document entry");
      read(&m, 1, "document mode");
      if (v[1] < 0 || v[2] <= 0 || static_cast<size_t>(v[1]) + v[2] > L || m > 1) fail("bad document entry");
      row.docs.push_back({v[0], v[1], v[2], m == 0 ? Mode::generation : Mode::understanding});
    }
    for (int32_t id : row.tokens)
      if (id < 0 || id >= ds.layout.total()) fail("token id outside vocabulary");
    ds.batch.rows.push_back(std::move(row));
  }
  if (pos != data.size()) fail("trailing bytes after last row");
  return ds;
}

}  // namespace mmt::codec
