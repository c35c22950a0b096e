import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    exclude: ["test/accept.test.ts", "**/node_modules/**"],
    testTimeout: 300_000,
    hookTimeout: 300_000,
    // one CPU: parallel test files would just contend
    pool: "forks",
    poolOptions: { forks: { singleFork: true } },
  },
});
