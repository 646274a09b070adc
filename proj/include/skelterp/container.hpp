/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/container.hpp
 *
 * Copyright 2026 The skelterp Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef SKELTERP_CONTAINER_HPP
#define SKELTERP_CONTAINER_HPP

#include "skelterp/common.hpp"

#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

namespace skelterp {
namespace detail {

/// Plain-text "key=value" header terminated by `end_header`, followed by a binary body.
struct Container
{
    std::string format;
    std::vector<std::pair<std::string, std::string>> header;
    std::vector<unsigned char> body;

    const std::string& get(const std::string& key) const
    {
        for (const auto& [k, v] : header) {
            if (k == key) {
                return v;
            }
        }
        throw IntegrityError("container header is missing key '" + key + "'");
    }
};

inline void write_container(const Container& c, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write '" + path + "'");
    }
    Fnv1a h;
    h.update(c.body.data(), c.body.size());
    out << c.format << '\n';
    for (const auto& [k, v] : c.header) {
        out << k << '=' << v << '\n';
    }
    out << "body_bytes=" << c.body.size() << '\n';
    out << "checksum=fnv1a64:" << to_hex(h.digest()) << '\n';
    out << "end_header\n";
    out.write(reinterpret_cast<const char*>(c.body.data()), static_cast<std::streamsize>(c.body.size()));
    if (!out) {
        throw IoError("failed writing '" + path + "'");
    }
}

inline Container read_container(const std::string& path, const std::string& expected_format)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    Container c;
    if (!std::getline(in, c.format) || c.format != expected_format) {
        throw IntegrityError("'" + path + "' is not a " + expected_format + " file");
    }
    std::string line;
    bool terminated = false;
    while (std::getline(in, line)) {
        if (line == "end_header") {
            terminated = true;
            break;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw IntegrityError("'" + path + "': malformed header line");
        }
        c.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    if (!terminated) {
        throw IntegrityError("'" + path + "': truncated header");
    }
    const std::size_t expected = std::stoull(c.get("body_bytes"));
    c.body.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (c.body.size() != expected) {
        throw IntegrityError("'" + path + "': body has " + std::to_string(c.body.size()) + " bytes, header declares "
                             + std::to_string(expected) + " (truncated or padded file)");
    }
    Fnv1a h;
    h.update(c.body.data(), c.body.size());
    const std::string actual = "fnv1a64:" + to_hex(h.digest());
    if (actual != c.get("checksum")) {
        throw IntegrityError("'" + path + "': checksum mismatch (header " + c.get("checksum") + ", body " + actual + ")");
    }
    return c;
}

} // namespace detail
} // namespace skelterp

#endif // SKELTERP_CONTAINER_HPP
