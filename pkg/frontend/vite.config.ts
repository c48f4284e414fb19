import { defineConfig } from "vitest/config";
import react from "@vitejs/plugin-react";

export default defineConfig({
  plugins: [react()],
  server: {
    port: 5173,
    // proxy API calls to the trialmatch service
    proxy: {
      "^/(trials|patients|match|matches|annotations|discrepancies|adjudications|metrics|runs|health)": {
        target: "http://127.0.0.1:8000",
        changeOrigin: true,
      },
    },
  },
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.{ts,tsx}"],
    testTimeout: 120000,
    hookTimeout: 120000,
  },
});
